"""AP, association collapsing, video-averaged mAP and top-N against brute-force oracles."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rendezvous.errors import ContractError, DimensionError, FormatError
from rendezvous.metrics import (FAMILIES, PredictionRecord, association_classes, association_labels,
                                association_scores, average_precision, batch_map, evaluate, paired_batch_test,
                                read_records, sample_batches, topn_accuracy, write_records_jsonl)
from rendezvous.vocab import load_vocabulary

VOCAB = load_vocabulary("""triplet,instrument,verb,target
g-r-l,grasper,retract,liver
g-g-l,grasper,grasp,liver
g-r-g,grasper,retract,gallbladder
h-d-g,hook,dissect,gallbladder
h-r-l,hook,retract,liver
""")


def oracle_ap(scores, labels):
    """Pairwise definition: an item's rank counts every item scored higher, plus
    tied items that come earlier in input order."""
    n = len(scores)
    pos = [j for j in range(n) if labels[j]]
    if not pos:
        return math.nan
    total = 0.0
    for j in pos:
        ahead = [i for i in range(n) if scores[i] > scores[j] or (scores[i] == scores[j] and i <= j)]
        total += sum(1 for i in ahead if labels[i]) / len(ahead)
    return total / len(pos)


def oracle_collapse(p, y, mode):
    second = {"iv": 1, "it": 2}[mode]
    keys = {}
    for k, t in enumerate(VOCAB.triplets):
        comp = (t.instrument, (t.instrument, t.verb, t.target)[second])
        keys.setdefault(comp, []).append(k)
    order = sorted(keys)
    return (np.array([[max(row[k] for k in keys[c]) for c in order] for row in p]),
            np.array([[int(any(row[k] for k in keys[c])) for c in order] for row in y]))


# -- average precision ---------------------------------------------------------------

def test_ap_hand_values():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0.1, 0.2], [1, 1]) == 1.0
    assert math.isnan(average_precision([0.3, 0.4], [0, 0]))


def test_ap_ties_keep_input_order():
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_ap_matches_pairwise_oracle_on_1000_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        # coarse scores force frequent ties
        s = rng.integers(0, 6, size=n) / 5.0
        y = (rng.random(n) < rng.random()).astype(int)
        got, want = average_precision(s, y), oracle_ap(s.tolist(), y.tolist())
        assert (math.isnan(got) and math.isnan(want)) or got == pytest.approx(want, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=30))
def test_ap_lies_in_unit_interval_and_is_one_for_perfect_ranking(items):
    s = np.array([a for a, _ in items])
    y = np.array([b for _, b in items], dtype=int)
    ap = average_precision(s, y)
    if y.any():
        assert 0 < ap <= 1
        perfect = np.where(y > 0, 2.0, 1.0)
        assert average_precision(perfect, y) == 1.0


def test_ap_shape_contracts():
    with pytest.raises(DimensionError):
        average_precision([0.1, 0.2], [1])
    with pytest.raises(ContractError):
        average_precision([], [])


# -- association collapsing ------------------------------------------------------------

def test_association_classes_are_sorted_unique_pairs():
    assert association_classes(VOCAB, "iv") == [(0, 0), (0, 1), (1, 0), (1, 2)]
    assert association_classes(VOCAB, "it") == [(0, 0), (0, 1), (1, 0), (1, 1)]
    with pytest.raises(ContractError):
        association_classes(VOCAB, "vt")


@pytest.mark.parametrize("mode", ["iv", "it"])
def test_collapse_matches_dictionary_oracle(mode):
    rng = np.random.default_rng(1)
    p = rng.random((40, VOCAB.C))
    y = (rng.random((40, VOCAB.C)) < 0.3).astype(int)
    ps, ys = oracle_collapse(p, y, mode)
    np.testing.assert_array_equal(association_scores(p, VOCAB, mode), ps)
    np.testing.assert_array_equal(association_labels(y, VOCAB, mode), ys)


def test_ivt_collapse_is_identity():
    p = np.random.default_rng(2).random((3, VOCAB.C))
    np.testing.assert_array_equal(association_scores(p, VOCAB, "ivt"), p)


# -- video-averaged mAP ------------------------------------------------------------------

def random_records(rng, n_videos=3, frames=12):
    recs = []
    for v in range(n_videos):
        for f in range(frames):
            recs.append(PredictionRecord(f"v{v}", f, rng.random(VOCAB.C),
                                         (rng.random(VOCAB.C) < 0.35).astype(int)))
    return recs


def oracle_map_ivt(records):
    videos = sorted({r.video_id for r in records})
    per_video = []
    for v in videos:
        rs = sorted((r for r in records if r.video_id == v), key=lambda r: r.frame_id)
        aps = [oracle_ap([r.probs[c] for r in rs], [r.labels[c] for r in rs]) for c in range(VOCAB.C)]
        aps = [a for a in aps if not math.isnan(a)]
        if aps:
            per_video.append(sum(aps) / len(aps))
    return sum(per_video) / len(per_video)


def test_video_averaged_map_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        recs = random_records(rng)
        assert evaluate(recs, VOCAB).mean_ap["ivt"] == pytest.approx(oracle_map_ivt(recs), abs=1e-12)


def test_map_is_mean_over_videos_not_pooled():
    a = [PredictionRecord("a", i, [p] + [0.0] * 4, [y] + [0] * 4)
         for i, (p, y) in enumerate([(0.9, 1), (0.1, 0)])]
    b = [PredictionRecord("b", i, [p] + [0.0] * 4, [y] + [0] * 4)
         for i, (p, y) in enumerate([(0.9, 0), (0.1, 1)])]
    rep = evaluate(a + b, VOCAB)
    assert rep.per_video_map["a"]["ivt"] == 1.0 and rep.per_video_map["b"]["ivt"] == 0.5
    assert rep.mean_ap["ivt"] == 0.75


def test_classes_absent_from_a_video_are_undefined_not_zero():
    recs = [PredictionRecord("a", 0, [0.9, 0.2, 0, 0, 0], [1, 0, 0, 0, 0])]
    rep = evaluate(recs, VOCAB)
    assert math.isnan(rep.per_video_ap["a"]["ivt"][1])
    assert rep.mean_ap["ivt"] == 1.0
    d = json.loads(rep.to_json())
    assert d["per_video_ap"]["a"]["ivt"][1] is None
    assert set(d["mean_ap"]) == set(FAMILIES)


def test_record_order_does_not_change_the_report():
    rng = np.random.default_rng(4)
    recs = random_records(rng)
    a = evaluate(recs, VOCAB).to_json()
    b = evaluate(list(reversed(recs)), VOCAB).to_json()
    assert a == b


def test_empty_evaluation_raises():
    with pytest.raises(ContractError):
        evaluate([], VOCAB)


def test_class_table_and_top_classes():
    rep = evaluate(random_records(np.random.default_rng(5)), VOCAB)
    lines = rep.class_table_csv("iv").splitlines()
    assert lines[0] == "class,ap" and lines[1].startswith('"grasper,retract",')
    top = rep.top_classes(3)
    assert len(top) == 3 and top[0][1] >= top[1][1] >= top[2][1]


# -- top-N ------------------------------------------------------------------------------

def test_topn_requires_all_positives_in_window_by_default():
    r = PredictionRecord("a", 0, [0.9, 0.8, 0.1, 0.0, 0.0], [1, 0, 1, 0, 0])
    assert topn_accuracy([r], 2) == 0.0
    assert topn_accuracy([r], 2, require="any") == 1.0
    assert topn_accuracy([r], 3) == 1.0


def test_topn_skips_frames_without_positives_and_validates_n():
    empty = PredictionRecord("a", 0, [0.5] * 5, [0] * 5)
    assert math.isnan(topn_accuracy([empty], 1))
    with pytest.raises(ContractError):
        topn_accuracy([empty], 0)
    with pytest.raises(ContractError):
        topn_accuracy([empty], 6)


def test_topn_matches_oracle_on_random_frames():
    rng = np.random.default_rng(6)
    recs = random_records(rng, 4, 30)
    for n in (1, 2, 3, 5):
        hits = total = 0
        for r in recs:
            pos = set(np.nonzero(r.labels)[0])
            if not pos:
                continue
            window = sorted(range(VOCAB.C), key=lambda k: (-r.probs[k], k))[:n]
            hits += pos <= set(window)
            total += 1
        assert topn_accuracy(recs, n) == pytest.approx(hits / total)


# -- records --------------------------------------------------------------------------

def test_record_validation():
    with pytest.raises(DimensionError):
        PredictionRecord("a", 0, [0.1, 0.2], [1])
    with pytest.raises(ContractError):
        PredictionRecord("a", 0, [1.5], [1])


def test_record_files_roundtrip_jsonl_and_csv(tmp_path):
    recs = random_records(np.random.default_rng(7), 2, 3)
    j = tmp_path / "r.jsonl"
    j.write_text(write_records_jsonl(recs))
    back = read_records(j)
    assert [r.video_id for r in back] == [r.video_id for r in recs]
    np.testing.assert_allclose(back[0].probs, recs[0].probs)
    c = tmp_path / "r.csv"
    header = ["video_id", "frame_id"] + [f"p{k}" for k in range(5)] + [f"y{k}" for k in range(5)]
    rows = [",".join(header)] + [",".join([r.video_id, str(r.frame_id)] + [repr(float(x)) for x in r.probs]
                                          + [str(int(x)) for x in r.labels]) for r in recs]
    c.write_text("\n".join(rows) + "\n")
    assert evaluate(read_records(c), VOCAB).to_json() == evaluate(recs, VOCAB).to_json()


def test_malformed_record_files_raise_format_error(tmp_path):
    bad = tmp_path / "r.jsonl"
    bad.write_text('{"video_id": "a"}\n')
    with pytest.raises(FormatError):
        read_records(bad)
    odd = tmp_path / "r.csv"
    odd.write_text("a,0,0.5,0.5,1\n")
    with pytest.raises(FormatError):
        read_records(odd)


# -- properties -------------------------------------------------------------------------

def test_ap_is_invariant_under_strictly_monotone_transforms():
    rng = np.random.default_rng(8)
    for _ in range(200):
        s = rng.random(20)
        y = (rng.random(20) < 0.4).astype(int)
        if y.any():
            assert average_precision(np.exp(3 * s) - 7, y) == average_precision(s, y)


def test_spec_style_ap_examples():
    assert average_precision([0.9, 0.1], [1, 0]) == 1.0
    assert average_precision([0.1, 0.9], [1, 0]) == 0.5


def test_collapse_of_a_single_triplet_and_the_max_rule():
    y = np.zeros(VOCAB.C, dtype=int)
    y[3] = 1
    assert association_labels(y, VOCAB, "iv").tolist() == [0, 0, 0, 1]
    p = np.zeros(VOCAB.C)
    p[0], p[2] = 0.3, 0.8        # both grasper,retract
    assert association_scores(p, VOCAB, "iv")[0] == 0.8


def test_pair_ground_truth_is_implied_by_triplet_ground_truth():
    rng = np.random.default_rng(9)
    y = (rng.random((50, VOCAB.C)) < 0.3).astype(int)
    for mode, second in (("iv", "verb"), ("it", "target")):
        pairs = association_labels(y, VOCAB, mode)
        classes = association_classes(VOCAB, mode)
        for f in range(50):
            for k in np.nonzero(y[f])[0]:
                t = VOCAB.triplets[k]
                assert pairs[f, classes.index((t.instrument, getattr(t, second)))] == 1


def test_perfect_predictor_scores_one_everywhere():
    rng = np.random.default_rng(10)
    recs = []
    for v in range(3):
        for f in range(10):
            y = (rng.random(VOCAB.C) < 0.4).astype(int)
            recs.append(PredictionRecord(f"v{v}", f, y.astype(float), y))
    rep = evaluate(recs, VOCAB)
    assert all(m == 1.0 for m in rep.mean_ap.values())


def test_constant_predictor_matches_oracle_prevalence():
    rng = np.random.default_rng(11)
    recs = [PredictionRecord("v", f, [0.5] * VOCAB.C, (rng.random(VOCAB.C) < 0.4).astype(int)) for f in range(12)]
    rep = evaluate(recs, VOCAB)
    for c in range(VOCAB.C):
        want = oracle_ap([0.5] * 12, [r.labels[c] for r in recs])
        got = rep.per_class_ap["ivt"][c]
        assert (math.isnan(want) and math.isnan(got)) or got == pytest.approx(want, abs=1e-12)


def test_duplicating_every_video_leaves_map_unchanged():
    recs = random_records(np.random.default_rng(12), 1, 15)
    twin = [PredictionRecord("copy", r.frame_id, r.probs, r.labels) for r in recs]
    assert evaluate(recs + twin, VOCAB).mean_ap == evaluate(recs, VOCAB).mean_ap


def test_topn_is_non_decreasing_and_full_window_is_one():
    recs = random_records(np.random.default_rng(13), 2, 20)
    acc = [topn_accuracy(recs, n) for n in range(1, VOCAB.C + 1)]
    assert all(a <= b for a, b in zip(acc, acc[1:])) and acc[-1] == 1.0
    r = PredictionRecord("a", 0, [0.9, 0.1, 0.2, 0.3, 0.0], [1, 0, 0, 0, 0])
    assert topn_accuracy([r], 5) == 1.0


# -- paired batches -------------------------------------------------------------------

def test_sampled_batches_stay_inside_one_video():
    recs = random_records(np.random.default_rng(14), 3, 12)
    windows = sample_batches(recs, 30, 5, seed=1)
    assert len(windows) == 30 and all(0 <= s <= 7 for _, s in windows)
    assert sample_batches(recs, 30, 5, seed=1) == windows
    with pytest.raises(ContractError):
        sample_batches(recs, 5, 13)


def test_batch_map_of_whole_video_equals_video_map():
    recs = random_records(np.random.default_rng(15), 2, 12)
    rep = evaluate(recs, VOCAB)
    assert batch_map(recs, VOCAB, [("v1", 0)], 12) == [rep.per_video_map["v1"]["ivt"]]


def test_paired_batch_test_prefers_the_better_model():
    rng = np.random.default_rng(16)
    truth = random_records(rng, 2, 40)
    good = [PredictionRecord(r.video_id, r.frame_id, np.clip(r.labels * 0.6 + rng.random(VOCAB.C) * 0.4, 0, 1),
                             r.labels) for r in truth]
    noise = [PredictionRecord(r.video_id, r.frame_id, rng.random(VOCAB.C), r.labels) for r in truth]
    res = paired_batch_test(good, noise, VOCAB, n_batches=30, batch_frames=10)
    assert res.method == "normal" and res.pvalue < 0.01
    with pytest.raises(ContractError):
        paired_batch_test(good[:-1], noise, VOCAB, batch_frames=10)
