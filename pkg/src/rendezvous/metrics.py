"""Evaluation protocol: per-class AP, video-averaged mAP for the component
(I, V, T) and association (IV, IT, IVT) families, and top-N accuracy."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError
from .vocab import TripletVocabulary, decompose_binary, decompose_scores

FAMILIES = ("i", "v", "t", "iv", "it", "ivt")
UNDEFINED = float("nan")


@dataclass
class PredictionRecord:
    video_id: str
    frame_id: int
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.uint8)
        if self.probs.shape != self.labels.shape or self.probs.ndim != 1:
            raise DimensionError("probabilities and labels must be equal-length vectors")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ContractError("probabilities must lie in [0, 1]")


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Items are ranked by descending score, ties kept in input order. Returns
    NaN when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if s.size == 0:
        raise ContractError("average_precision needs at least one item")
    n_pos = int((y > 0).sum())
    if n_pos == 0:
        return UNDEFINED
    order = np.argsort(-s, kind="stable")
    hits = (y[order] > 0).astype(np.float64)
    ranks = np.arange(1, s.size + 1)
    return float((np.cumsum(hits) / ranks)[hits > 0].sum() / n_pos)


def association_classes(vocab: TripletVocabulary, mode: str) -> list[tuple[int, ...]]:
    """Sorted unique (i, v) or (i, t) tuples, or all triplet ids for IVT."""
    if mode == "ivt":
        return [(k,) for k in range(vocab.C)]
    second = {"iv": "verb", "it": "target"}.get(mode)
    if second is None:
        raise ContractError(f"unknown association mode {mode!r}")
    return sorted({(t.instrument, getattr(t, second)) for t in vocab.triplets})


def _association_groups(vocab: TripletVocabulary, mode: str) -> tuple[list, list[np.ndarray]]:
    classes = association_classes(vocab, mode)
    if mode == "ivt":
        return classes, [np.array([k]) for k in range(vocab.C)]
    second = "verb" if mode == "iv" else "target"
    inst = vocab.component_ids("instrument")
    other = vocab.component_ids(second)
    groups = [np.nonzero((inst == a) & (other == b))[0] for a, b in classes]
    return classes, groups


def association_scores(p_ivt, vocab: TripletVocabulary, mode: str) -> np.ndarray:
    """Collapse triplet scores to pair classes by max (identity for IVT)."""
    p = np.asarray(p_ivt, dtype=np.float64)
    if p.shape[-1] != vocab.C:
        raise DimensionError(f"expected {vocab.C} triplet scores, got {p.shape[-1]}")
    _, groups = _association_groups(vocab, mode)
    return np.stack([p[..., g].max(axis=-1) for g in groups], axis=-1)


def association_labels(y_ivt, vocab: TripletVocabulary, mode: str) -> np.ndarray:
    """Collapse triplet ground truth to pair classes by OR."""
    y = np.asarray(y_ivt)
    if y.shape[-1] != vocab.C:
        raise DimensionError(f"expected {vocab.C} triplet labels, got {y.shape[-1]}")
    _, groups = _association_groups(vocab, mode)
    return np.stack([(y[..., g] > 0).any(axis=-1) for g in groups], axis=-1).astype(np.uint8)


def family_arrays(probs: np.ndarray, labels: np.ndarray, vocab: TripletVocabulary):
    """Scores and ground truth for all six families from ``frames x C`` arrays."""
    ps = decompose_scores(probs, vocab)
    ys = decompose_binary(labels, vocab)
    out = {"i": (ps[0], ys[0]), "v": (ps[1], ys[1]), "t": (ps[2], ys[2])}
    for mode in ("iv", "it", "ivt"):
        out[mode] = (association_scores(probs, vocab, mode), association_labels(labels, vocab, mode))
    return out


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.array([average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])])


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else UNDEFINED


@dataclass
class EvalReport:
    """Video-averaged evaluation.

    ``per_video_ap[video][family]`` holds per-class APs (NaN = no positives in
    that video); ``mean_ap[family]`` is the mean over videos of the per-video
    mean over defined classes.
    """

    videos: list[str]
    class_names: dict[str, list[str]]
    per_video_ap: dict[str, dict[str, list[float]]]
    per_video_map: dict[str, dict[str, float]]
    per_class_ap: dict[str, list[float]]
    mean_ap: dict[str, float]
    topn: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        clean = lambda v: None if isinstance(v, float) and math.isnan(v) else v  # noqa: E731
        return {
            "videos": self.videos,
            "class_names": self.class_names,
            "per_video_ap": {vid: {f: [clean(a) for a in aps] for f, aps in fam.items()}
                             for vid, fam in self.per_video_ap.items()},
            "per_video_map": {vid: {f: clean(m) for f, m in fam.items()}
                              for vid, fam in self.per_video_map.items()},
            "per_class_ap": {f: [clean(a) for a in aps] for f, aps in self.per_class_ap.items()},
            "mean_ap": {f: clean(m) for f, m in self.mean_ap.items()},
            "topn": {str(n): a for n, a in self.topn.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def class_table_csv(self, family: str) -> str:
        """Per-class AP table: ``class,ap`` rows (blank AP when undefined)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap"])
        for name, ap in zip(self.class_names[family], self.per_class_ap[family]):
            w.writerow([name, "" if math.isnan(ap) else f"{ap:.6f}"])
        return buf.getvalue()

    def top_classes(self, k: int = 10, family: str = "ivt") -> list[tuple[str, float]]:
        """The ``k`` best-recognised classes by AP (undefined classes skipped)."""
        pairs = [(n, a) for n, a in zip(self.class_names[family], self.per_class_ap[family])
                 if not math.isnan(a)]
        return sorted(pairs, key=lambda p: -p[1])[:k]


def class_names(vocab: TripletVocabulary) -> dict[str, list[str]]:
    names = {"i": list(vocab.instruments), "v": list(vocab.verbs), "t": list(vocab.targets),
             "ivt": vocab.names()}
    for mode, second in (("iv", vocab.verbs), ("it", vocab.targets)):
        names[mode] = [f"{vocab.instruments[a]},{second[b]}" for a, b in association_classes(vocab, mode)]
    return names


def _group_by_video(records: Sequence[PredictionRecord]):
    videos: dict[str, list[PredictionRecord]] = {}
    for r in records:
        videos.setdefault(str(r.video_id), []).append(r)
    for vid in videos:
        videos[vid].sort(key=lambda r: r.frame_id)
    return dict(sorted(videos.items()))


def evaluate(records: Sequence[PredictionRecord], vocab: TripletVocabulary,
             topn: Iterable[int] = (5, 10, 20)) -> EvalReport:
    if not records:
        raise ContractError("cannot evaluate an empty record set")
    by_video = _group_by_video(records)
    per_video_ap, per_video_map = {}, {}
    for vid, recs in by_video.items():
        probs = np.stack([r.probs for r in recs])
        labels = np.stack([r.labels for r in recs])
        fams = family_arrays(probs, labels, vocab)
        per_video_ap[vid] = {f: per_class_ap(*fams[f]).tolist() for f in FAMILIES}
        per_video_map[vid] = {f: _nanmean(per_video_ap[vid][f]) for f in FAMILIES}
    mean_ap = {f: _nanmean([per_video_map[v][f] for v in by_video]) for f in FAMILIES}
    per_class = {}
    for f in FAMILIES:
        stacked = np.array([per_video_ap[v][f] for v in by_video], dtype=np.float64)
        per_class[f] = [_nanmean(stacked[:, c]) for c in range(stacked.shape[1])]
    ordered = [r for recs in by_video.values() for r in recs]
    top = {n: topn_accuracy(ordered, n) for n in topn if n <= vocab.C}
    return EvalReport(list(by_video), class_names(vocab), per_video_ap, per_video_map,
                      per_class, mean_ap, top)


def topn_accuracy(records: Sequence[PredictionRecord], n: int, require: str = "all") -> float:
    """Fraction of frames with positives whose true triplets rank within the top ``n``.

    ``require='all'`` needs every positive inside the window, ``'any'`` at
    least one. Ranking is by descending score, ties by class index.
    """
    if n < 1:
        raise ContractError("N must be >= 1")
    if require not in ("all", "any"):
        raise ContractError(f"require must be 'all' or 'any', got {require!r}")
    hits = total = 0
    for r in records:
        if n > r.probs.size:
            raise ContractError(f"N={n} exceeds the {r.probs.size} classes")
        pos = np.nonzero(r.labels)[0]
        if pos.size == 0:
            continue
        window = np.argsort(-r.probs, kind="stable")[:n]
        inside = np.isin(pos, window)
        hits += bool(inside.all() if require == "all" else inside.any())
        total += 1
    return hits / total if total else UNDEFINED


# -- paired batches for significance testing ----------------------------------------

def sample_batches(records: Sequence[PredictionRecord], n_batches: int = 30, batch_frames: int = 100,
                   seed: int = 0) -> list[tuple[str, int]]:
    """Random ``(video, first frame index)`` windows of consecutive frames.

    Windows never cross a video boundary; videos shorter than ``batch_frames``
    are skipped. Sampling is with replacement over all valid windows.
    """
    if n_batches < 1 or batch_frames < 1:
        raise ContractError("n_batches and batch_frames must be >= 1")
    windows = [(vid, s) for vid, recs in _group_by_video(records).items()
               for s in range(len(recs) - batch_frames + 1)]
    if not windows:
        raise ContractError(f"no video has {batch_frames} frames")
    rng = np.random.default_rng(seed)
    return [windows[k] for k in rng.integers(0, len(windows), size=n_batches)]


def batch_map(records: Sequence[PredictionRecord], vocab: TripletVocabulary,
              windows: Sequence[tuple[str, int]], batch_frames: int, family: str = "ivt") -> list[float]:
    """mAP of ``family`` over each window's frames (classes without positives skipped)."""
    if family not in FAMILIES:
        raise ContractError(f"unknown family {family!r}")
    by_video = _group_by_video(records)
    out = []
    for vid, start in windows:
        recs = by_video[vid][start:start + batch_frames]
        fams = family_arrays(np.stack([r.probs for r in recs]), np.stack([r.labels for r in recs]), vocab)
        out.append(_nanmean(per_class_ap(*fams[family])))
    return out


def paired_batch_test(records_a: Sequence[PredictionRecord], records_b: Sequence[PredictionRecord],
                      vocab: TripletVocabulary, n_batches: int = 30, batch_frames: int = 100,
                      family: str = "ivt", seed: int = 0):
    """Wilcoxon signed-rank test on per-batch mAPs of two models over the same windows."""
    from .wilcoxon import wilcoxon_signed_rank

    keys_a = sorted((str(r.video_id), r.frame_id) for r in records_a)
    keys_b = sorted((str(r.video_id), r.frame_id) for r in records_b)
    if keys_a != keys_b:
        raise ContractError("both record sets must cover the same frames")
    windows = sample_batches(records_a, n_batches, batch_frames, seed)
    a = batch_map(records_a, vocab, windows, batch_frames, family)
    b = batch_map(records_b, vocab, windows, batch_frames, family)
    return wilcoxon_signed_rank(np.nan_to_num(a), np.nan_to_num(b))


# -- record files --------------------------------------------------------------------

def write_records_jsonl(records: Sequence[PredictionRecord]) -> str:
    return "".join(json.dumps({"video_id": r.video_id, "frame_id": int(r.frame_id),
                               "probs": r.probs.tolist(), "labels": r.labels.tolist()}) + "\n"
                   for r in records)


def read_records(path) -> list[PredictionRecord]:
    """Read records from JSON lines or CSV.

    CSV columns: ``video_id, frame_id, p_0..p_{C-1}, y_0..y_{C-1}``.
    """
    from pathlib import Path

    text = Path(path).read_text(encoding="utf-8")
    out = []
    try:
        if str(path).endswith((".jsonl", ".json")):
            for line in text.splitlines():
                if line.strip():
                    d = json.loads(line)
                    out.append(PredictionRecord(str(d["video_id"]), int(d["frame_id"]), d["probs"], d["labels"]))
        else:
            rows = list(csv.reader(io.StringIO(text)))
            body = rows[1:] if rows and not _is_number(rows[0][1]) else rows
            for row in body:
                if not row:
                    continue
                vals = row[2:]
                if len(vals) % 2:
                    raise FormatError("CSV record needs equal numbers of probabilities and labels")
                c = len(vals) // 2
                out.append(PredictionRecord(row[0], int(row[1]), [float(v) for v in vals[:c]],
                                            [int(float(v)) for v in vals[c:]]))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed record file {path}: {exc}") from None
    return out


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
