"""Triplet vocabulary, component decomposition and count consistency checks."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, FormatError

COMPONENTS = ("instrument", "verb", "target")

# Component orderings as published in the CholecT50 co-occurrence tables.
CHOLECT50_INSTRUMENTS = ("grasper", "bipolar", "hook", "scissors", "clipper", "irrigator")
CHOLECT50_VERBS = ("grasp", "retract", "dissect", "coagulate", "clip", "cut", "aspirate",
                   "irrigate", "pack", "null-verb")
CHOLECT50_TARGETS = ("gallbladder", "cystic-plate", "cystic-duct", "cystic-artery",
                     "cystic-pedicle", "blood-vessel", "fluid", "abdominal-wall/cavity",
                     "liver", "adhesion", "omentum", "peritoneum", "gut", "specimen-bag",
                     "null-target")


@dataclass(frozen=True)
class Triplet:
    id: int
    name: str
    instrument: int
    verb: int
    target: int

    @property
    def ivt(self) -> tuple[int, int, int]:
        return self.instrument, self.verb, self.target


@dataclass(frozen=True)
class TripletVocabulary:
    """Immutable map between triplet ids and (instrument, verb, target) ids."""

    triplets: tuple[Triplet, ...]
    instruments: tuple[str, ...]
    verbs: tuple[str, ...]
    targets: tuple[str, ...]
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        ivt = [t.ivt for t in self.triplets]
        if [t.id for t in self.triplets] != list(range(len(self.triplets))):
            raise FormatError("triplet ids must be dense and ordered 0..C-1")
        dup = [k for k, n in Counter(ivt).items() if n > 1]
        if dup:
            raise FormatError(f"duplicate (instrument, verb, target) tuples: {dup}")
        for comp, names in zip(COMPONENTS, self.sizes_by_name()):
            used = {getattr(t, comp) for t in self.triplets}
            unused = sorted(set(range(len(names))) - used)
            if unused:
                raise FormatError(f"{comp} ids {unused} are not referenced by any triplet")
        object.__setattr__(self, "_index", {v: k for k, v in enumerate(ivt)})

    def sizes_by_name(self):
        return self.instruments, self.verbs, self.targets

    @property
    def C(self) -> int:
        return len(self.triplets)

    @property
    def C_I(self) -> int:
        return len(self.instruments)

    @property
    def C_V(self) -> int:
        return len(self.verbs)

    @property
    def C_T(self) -> int:
        return len(self.targets)

    def __len__(self) -> int:
        return self.C

    def component_ids(self, component: str) -> np.ndarray:
        """Per-triplet ids of one component, as an int array of length C."""
        return np.array([getattr(t, component) for t in self.triplets], dtype=np.int64)

    def lookup(self, instrument: int, verb: int, target: int) -> int:
        return self._index[(instrument, verb, target)]

    def names(self) -> list[str]:
        return [t.name for t in self.triplets]

    def to_csv(self, counts: Sequence[int] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["triplet", "instrument", "verb", "target"] + (["count"] if counts is not None else []))
        for k, t in enumerate(self.triplets):
            row = [t.name, self.instruments[t.instrument], self.verbs[t.verb], self.targets[t.target]]
            w.writerow(row + ([int(counts[k])] if counts is not None else []))
        return buf.getvalue()


def _read_text(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        return Path(source).read_text(encoding="utf-8")
    return source


def load_vocabulary(
    source,
    instruments: Sequence[str] | None = None,
    verbs: Sequence[str] | None = None,
    targets: Sequence[str] | None = None,
    with_counts: bool = False,
):
    """Parse a CSV vocabulary (header ``triplet,instrument,verb,target[,count]``).

    ``source`` is a path or the CSV text itself. Triplet ids follow row order.
    When component name lists are given they fix the component ids and any
    name outside them is rejected; otherwise ids follow first appearance.
    With ``with_counts`` the per-triplet count column is returned as well.
    """
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise FormatError("empty vocabulary file") from None
    if header[:4] != ["triplet", "instrument", "verb", "target"]:
        raise FormatError(f"unexpected header {header}")
    has_count = len(header) > 4 and header[4] == "count"
    fixed = {"instrument": instruments, "verb": verbs, "target": targets}
    maps: dict[str, dict[str, int]] = {
        c: ({n: k for k, n in enumerate(fixed[c])} if fixed[c] is not None else {}) for c in COMPONENTS
    }
    triplets, counts = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        if len(row) < 4:
            raise FormatError(f"line {lineno}: expected at least 4 fields, got {len(row)}")
        name = row[0].strip()
        ids = []
        for comp, value in zip(COMPONENTS, row[1:4]):
            value = value.strip()
            table = maps[comp]
            if value not in table:
                if fixed[comp] is not None:
                    raise FormatError(f"line {lineno}: unknown {comp} {value!r}")
                table[value] = len(table)
            ids.append(table[value])
        triplets.append(Triplet(len(triplets), name, *ids))
        if has_count:
            try:
                c = int(row[4])
            except (IndexError, ValueError):
                raise FormatError(f"line {lineno}: bad count field") from None
            if c < 0:
                raise FormatError(f"line {lineno}: negative count")
            counts.append(c)
    if not triplets:
        raise FormatError("vocabulary has no rows")
    vocab = TripletVocabulary(
        tuple(triplets),
        *(tuple(sorted(maps[c], key=maps[c].get)) for c in COMPONENTS),
    )
    if with_counts:
        return vocab, (np.array(counts, dtype=np.int64) if has_count else None)
    return vocab


def data_path(name: str) -> Path:
    return Path(str(resources.files("rendezvous") / "data" / name))


def cholect50_vocabulary(with_counts: bool = False):
    """The 100-class CholecT50 vocabulary with its published instance counts."""
    return load_vocabulary(data_path("cholect50.csv"), CHOLECT50_INSTRUMENTS, CHOLECT50_VERBS,
                           CHOLECT50_TARGETS, with_counts=with_counts)


# -- decomposition -------------------------------------------------------------

def _check_len(vec: np.ndarray, vocab: TripletVocabulary) -> np.ndarray:
    vec = np.asarray(vec)
    if vec.shape[-1] != vocab.C:
        raise DimensionError(f"expected length {vocab.C} along the last axis, got {vec.shape[-1]}")
    return vec


def decompose_binary(y_ivt, vocab: TripletVocabulary):
    """Component presence: a component bit is set iff any triplet using it is set.

    Works on a single vector or a ``frames x C`` matrix.
    """
    y = _check_len(y_ivt, vocab).astype(bool)
    out = []
    for comp, n in zip(COMPONENTS, (vocab.C_I, vocab.C_V, vocab.C_T)):
        ids = vocab.component_ids(comp)
        res = np.zeros(y.shape[:-1] + (n,), dtype=bool)
        for k in range(n):
            res[..., k] = y[..., ids == k].any(axis=-1)
        out.append(res.astype(np.uint8))
    return tuple(out)


def decompose_scores(p_ivt, vocab: TripletVocabulary):
    """Component score = max over triplets sharing that component (0 if none)."""
    p = _check_len(p_ivt, vocab).astype(np.float64)
    out = []
    for comp, n in zip(COMPONENTS, (vocab.C_I, vocab.C_V, vocab.C_T)):
        ids = vocab.component_ids(comp)
        res = np.zeros(p.shape[:-1] + (n,))
        for k in range(n):
            sel = ids == k
            if sel.any():
                res[..., k] = p[..., sel].max(axis=-1)
        out.append(res)
    return tuple(out)


# -- count consistency -------------------------------------------------------------

def component_sums(vocab: TripletVocabulary, counts) -> dict[str, dict[str, int]]:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (vocab.C,):
        raise DimensionError(f"counts must cover all {vocab.C} triplets")
    sums = {}
    for comp, names in zip(COMPONENTS, vocab.sizes_by_name()):
        ids = vocab.component_ids(comp)
        sums[comp] = {names[k]: int(counts[ids == k].sum()) for k in range(len(names))}
    return sums


def pair_sums(vocab: TripletVocabulary, counts, second: str) -> dict[tuple[str, str], int]:
    """Triplet counts summed per (instrument, ``second``) pair."""
    counts = np.asarray(counts, dtype=np.int64)
    names2 = vocab.verbs if second == "verb" else vocab.targets
    out: dict[tuple[str, str], int] = {}
    for t, c in zip(vocab.triplets, counts):
        key = (vocab.instruments[t.instrument], names2[getattr(t, second)])
        out[key] = out.get(key, 0) + int(c)
    return out


@dataclass
class ConsistencyReport:
    total: int
    component_sums: dict[str, dict[str, int]]
    mismatches: list[dict] = field(default_factory=list)
    checks: int = 0

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def to_json(self) -> str:
        return json.dumps({"total": self.total, "component_sums": self.component_sums,
                           "checks": self.checks, "mismatches": self.mismatches, "ok": self.ok},
                          indent=2, sort_keys=True)


def consistency_check(
    vocab: TripletVocabulary,
    counts,
    component_counts: dict[str, dict[str, int]] | None = None,
    iv_counts: dict[tuple[str, str], int] | None = None,
    it_counts: dict[tuple[str, str], int] | None = None,
    expected_total: int | None = None,
) -> ConsistencyReport:
    """Compare sums of per-triplet counts against published component/pair tables.

    Also checks that every published pair table's per-instrument row sums equal
    the published instrument counts. Report only; never raises on mismatch.
    """
    sums = component_sums(vocab, counts)
    total = int(np.asarray(counts).sum())
    report = ConsistencyReport(total=total, component_sums=sums)

    def compare(kind, key, derived, published):
        report.checks += 1
        if derived != published:
            report.mismatches.append({"table": kind, "key": list(key) if isinstance(key, tuple) else key,
                                      "derived": derived, "published": published})

    if expected_total is not None:
        compare("total", "total", total, expected_total)
    if component_counts:
        for comp, table in component_counts.items():
            for name, published in table.items():
                compare(comp, name, sums[comp].get(name, 0), published)
    for kind, table, second in (("instrument-verb", iv_counts, "verb"),
                                ("instrument-target", it_counts, "target")):
        if not table:
            continue
        derived = pair_sums(vocab, counts, second)
        for key in sorted(set(table) | set(derived)):
            compare(kind, key, derived.get(key, 0), table.get(key, 0))
        if component_counts and "instrument" in component_counts:
            rows: dict[str, int] = {}
            for (inst, _), c in table.items():
                rows[inst] = rows.get(inst, 0) + c
            for inst, published in component_counts["instrument"].items():
                compare(f"{kind} row sum", inst, rows.get(inst, 0), published)
    return report


def read_count_table(path) -> dict:
    """Read a published count table CSV.

    Recognised headers: ``component,name,count`` (component counts),
    ``instrument,verb,count`` / ``instrument,target,count`` (pair counts), and
    ``triplet,count``.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path}: empty count table")
    header = [h.strip().lower() for h in rows[0]]
    body = [r for r in rows[1:] if r and "".join(r).strip()]
    try:
        if header == ["component", "name", "count"]:
            out: dict = {}
            for comp, name, c in body:
                out.setdefault(comp.strip(), {})[name.strip()] = int(c)
            return out
        if len(header) == 3 and header[0] == "instrument" and header[2] == "count":
            return {(a.strip(), b.strip()): int(c) for a, b, c in body}
        if header[-1] == "count":
            return {r[0].strip(): int(r[-1]) for r in body}
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    raise FormatError(f"{path}: unrecognised header {header}")


def counts_from_table(vocab: TripletVocabulary, table: dict[str, int]) -> np.ndarray:
    """Align a ``{triplet name: count}`` table to vocabulary order."""
    missing = [n for n in vocab.names() if n not in table]
    if missing:
        raise FormatError(f"count table lacks {len(missing)} triplets, e.g. {missing[:3]}")
    return np.array([table[n] for n in vocab.names()], dtype=np.int64)


def cholect50_report() -> ConsistencyReport:
    vocab, counts = cholect50_vocabulary(with_counts=True)
    return consistency_check(
        vocab, counts,
        component_counts=read_count_table(data_path("cholect50_components.csv")),
        iv_counts=read_count_table(data_path("cholect50_iv.csv")),
        it_counts=read_count_table(data_path("cholect50_it.csv")),
        expected_total=161005,
    )
