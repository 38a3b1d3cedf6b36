"""Triplet vocabulary loading, decomposition and published-count consistency."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendezvous.errors import FormatError
from rendezvous.vocab import (CHOLECT50_INSTRUMENTS, TripletVocabulary, cholect50_report,
                              cholect50_vocabulary, component_sums, consistency_check, counts_from_table,
                              data_path, decompose_binary, decompose_scores, load_vocabulary, pair_sums,
                              read_count_table)

SMALL = """triplet,instrument,verb,target
a,grasper,retract,liver
b,grasper,grasp,liver
c,hook,dissect,gallbladder
"""


def test_cholect50_has_100_classes_and_published_component_sizes():
    v = cholect50_vocabulary()
    assert (v.C, v.C_I, v.C_V, v.C_T) == (100, 6, 10, 15)
    assert v.instruments == CHOLECT50_INSTRUMENTS


def test_published_sums_reproduce_from_triplet_counts():
    v, counts = cholect50_vocabulary(with_counts=True)
    sums = component_sums(v, counts)
    assert sums["instrument"] == {"grasper": 90969, "bipolar": 6697, "hook": 52820,
                                  "scissors": 2135, "clipper": 3379, "irrigator": 5005}
    assert int(counts.sum()) == 161005
    assert cholect50_report().ok


def test_pair_table_row_sums_equal_instrument_counts():
    iv = read_count_table(data_path("cholect50_iv.csv"))
    rows = {}
    for (inst, _), c in iv.items():
        rows[inst] = rows.get(inst, 0) + c
    assert rows["grasper"] == 90969 and rows["irrigator"] == 5005


def test_consistency_check_reports_a_perturbed_count():
    v, counts = cholect50_vocabulary(with_counts=True)
    bad = counts.copy()
    bad[0] += 1
    rep = consistency_check(v, bad, read_count_table(data_path("cholect50_components.csv")),
                            expected_total=161005)
    assert not rep.ok
    kinds = {m["table"] for m in rep.mismatches}
    assert "total" in kinds and "instrument" in kinds


def test_load_small_vocabulary_assigns_ids_by_first_appearance():
    v = load_vocabulary(SMALL)
    assert v.instruments == ("grasper", "hook")
    assert v.lookup(1, 2, 1) == 2
    assert v.names() == ["a", "b", "c"]


@pytest.mark.parametrize("text", [
    "",
    "name,i,v,t\na,b,c,d\n",
    "triplet,instrument,verb,target\na,grasper,retract\n",
    "triplet,instrument,verb,target,count\na,grasper,retract,liver,-1\n",
])
def test_malformed_vocabulary_raises_format_error(text, tmp_path):
    path = tmp_path / "v.csv"
    path.write_text(text)
    with pytest.raises(FormatError):
        load_vocabulary(path)


def test_fixed_component_lists_reject_unknown_names():
    with pytest.raises(FormatError):
        load_vocabulary(SMALL, instruments=["grasper"])


def test_duplicate_triplets_are_rejected():
    with pytest.raises(ValueError):
        load_vocabulary(SMALL + "d,hook,dissect,gallbladder\n")


def test_decompose_binary_single_triplet():
    v = load_vocabulary(SMALL)
    y_i, y_v, y_t = decompose_binary([0, 0, 1], v)
    assert list(y_i) == [0, 1] and list(y_v) == [0, 0, 1] and list(y_t) == [0, 1]


def test_decompose_scores_takes_max_over_matching_triplets():
    v = load_vocabulary(SMALL)
    p_i, p_v, p_t = decompose_scores([0.2, 0.7, 0.1], v)
    np.testing.assert_allclose(p_i, [0.7, 0.1])
    np.testing.assert_allclose(p_t, [0.7, 0.1])
    np.testing.assert_allclose(p_v, [0.2, 0.7, 0.1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=100, max_size=100))
def test_decompose_scores_matches_loop_oracle(p):
    v = cholect50_vocabulary()
    p = np.array(p)
    got = decompose_scores(p, v)
    for comp, arr in zip(("instrument", "verb", "target"), got):
        ids = v.component_ids(comp)
        for k in range(arr.size):
            members = p[ids == k]
            assert arr[k] == (members.max() if members.size else 0.0)


def test_counts_from_table_requires_every_triplet():
    v = load_vocabulary(SMALL)
    with pytest.raises(FormatError):
        counts_from_table(v, {"a": 1, "b": 2})
    np.testing.assert_array_equal(counts_from_table(v, {"a": 1, "b": 2, "c": 3}), [1, 2, 3])


def test_to_csv_roundtrip():
    v, counts = cholect50_vocabulary(with_counts=True)
    again, c2 = load_vocabulary(v.to_csv(counts), v.instruments, v.verbs, v.targets, with_counts=True)
    assert again == v
    np.testing.assert_array_equal(c2, counts)


def test_pair_sums_over_small_vocabulary():
    v = load_vocabulary(SMALL)
    assert pair_sums(v, [1, 2, 3], "target") == {("grasper", "liver"): 3, ("hook", "gallbladder"): 3}
    assert isinstance(v, TripletVocabulary)
