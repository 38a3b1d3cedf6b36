"""Synthetic surgical-looking scenes with exact triplet ground truth.

The image is split into vertical background bands, each coloured by a
target. Every active triplet is drawn as a square sprite inside a band of its
target: the sprite rim colour encodes the instrument and the core texture
encodes the verb. So the verb is read off the instrument's appearance and the
target off its position. Frames are grouped into contiguous "videos".
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .vocab import TripletVocabulary, data_path, load_vocabulary

SPRITE = 8
CORE_INSET = 2
SPLIT_RATIO = (35, 5, 10)

# 4x4 verb textures (1 = light, 0 = dark)
_VERB_PATTERNS = [
    [[1, 1, 1, 1], [0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]],   # horizontal stripes
    [[1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0], [1, 0, 1, 0]],   # vertical stripes
    [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]],   # checker
    [[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 1, 1]],   # solid
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],   # diagonal
    [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],   # cross
    [[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]],   # centre dot
    [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],   # ring
    [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],   # blocks
    [[1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 0, 0], [1, 0, 0, 0]],   # wedge
]


@dataclass
class SyntheticConfig:
    n_videos: int = 10
    frames_per_video: int = 60
    image_hw: tuple[int, int] = (32, 56)
    n_bands: int = 4
    slots_per_band: int = 3
    min_cooccurrence: int = 1
    max_cooccurrence: int = 3
    noise: float = 0.05
    prior: list[float] | None = None      # per-triplet sampling weights; uniform if None
    vocabulary: str | None = None          # CSV path; bundled synthetic vocabulary if None

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        if self.n_videos < 3:
            raise ConfigError("need at least 3 videos for a train/val/test split")
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if not 0 <= self.min_cooccurrence <= self.max_cooccurrence:
            raise ConfigError("need 0 <= min_cooccurrence <= max_cooccurrence")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        h, w = self.image_hw
        if w // self.n_bands < SPRITE or h // self.slots_per_band < SPRITE:
            raise ConfigError(f"image {self.image_hw} too small for {self.n_bands} bands x "
                              f"{self.slots_per_band} slots of {SPRITE}px sprites")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic config: {exc}") from None

    def load_vocabulary(self) -> TripletVocabulary:
        return load_vocabulary(self.vocabulary or data_path("synthetic.csv"))


@dataclass
class SceneSet:
    images: np.ndarray          # N x H x W x 3, float32 in [0, 1]
    labels: np.ndarray          # N x C, uint8
    video_ids: list[str]
    frame_ids: np.ndarray       # N, int64
    geometry: list[list[tuple[int, int, int]]] = field(default_factory=list)  # (triplet, row, col)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SyntheticDataset:
    train: SceneSet
    val: SceneSet
    test: SceneSet
    vocab: TripletVocabulary
    config: SyntheticConfig
    seed: int

    def split(self, name: str) -> SceneSet:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def palette(n: int, saturation: float, value: float, offset: float = 0.0) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb((k + offset) / n % 1.0, saturation, value) for k in range(n)])


def split_counts(n_videos: int) -> tuple[int, int, int]:
    """Video counts per split following the 35:5:10 ratio, each split non-empty."""
    total = sum(SPLIT_RATIO)
    val = max(1, round(n_videos * SPLIT_RATIO[1] / total))
    test = max(1, round(n_videos * SPLIT_RATIO[2] / total))
    train = n_videos - val - test
    if train < 1:
        raise ConfigError(f"{n_videos} videos cannot fill all three splits")
    return train, val, test


def _check_capacity(cfg: SyntheticConfig, vocab: TripletVocabulary) -> None:
    k = cfg.max_cooccurrence
    if k > vocab.C:
        raise ConfigError(f"requested {k} co-occurring triplets but the vocabulary has {vocab.C}")
    if k > cfg.n_bands:
        raise ConfigError(f"requested {k} co-occurring triplets but only {cfg.n_bands} target bands")
    if vocab.C_V > len(_VERB_PATTERNS):
        raise ConfigError(f"only {len(_VERB_PATTERNS)} verb textures for {vocab.C_V} verbs")
    if cfg.prior is not None:
        p = np.asarray(cfg.prior, dtype=np.float64)
        if p.shape != (vocab.C,) or np.any(p < 0) or p.sum() <= 0:
            raise ConfigError("prior must be C non-negative weights with positive sum")
        if np.count_nonzero(p) < k:
            raise ConfigError("prior leaves fewer classes than the requested co-occurrence")


def prior_probs(cfg: SyntheticConfig, vocab: TripletVocabulary) -> np.ndarray:
    p = np.ones(vocab.C) if cfg.prior is None else np.asarray(cfg.prior, dtype=np.float64)
    return p / p.sum()


def cholect50_prior(vocab: TripletVocabulary, power: float = 1.0) -> list[float]:
    """Per-triplet sampling weights from the published CholecT50 instance counts.

    ``power < 1`` flattens the long tail (0.5 is a square-root tempering).
    """
    from .vocab import cholect50_vocabulary

    full, counts = cholect50_vocabulary(with_counts=True)
    index = {name: k for k, name in enumerate(full.names())}
    missing = [n for n in vocab.names() if n not in index]
    if missing:
        raise ConfigError(f"triplets absent from CholecT50: {missing[:3]}")
    return [float(counts[index[n]]) ** power for n in vocab.names()]


def sample_triplets(rng: np.random.Generator, k: int, probs: np.ndarray) -> list[int]:
    """``k`` distinct triplet ids drawn sequentially from ``probs`` without replacement."""
    return [int(t) for t in rng.choice(len(probs), size=k, replace=False, p=probs)] if k else []


def render_scene(triplets: list[int], vocab: TripletVocabulary, cfg: SyntheticConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Draw one frame; returns the image and ``(triplet, row, col)`` sprite corners."""
    h, w = cfg.image_hw
    band_w = w // cfg.n_bands
    slot_h = h // cfg.slots_per_band
    inst_rgb = palette(vocab.C_I, 0.9, 0.95)
    tgt_rgb = palette(vocab.C_T, 0.5, 0.6, offset=0.5)
    # bands: needed targets first (random bands), distractor targets elsewhere
    needed = sorted({vocab.triplets[t].target for t in triplets})
    bands = rng.permutation(cfg.n_bands)
    band_target = rng.integers(0, vocab.C_T, size=cfg.n_bands)
    target_band = {}
    for tgt, b in zip(needed, bands):
        band_target[b] = tgt
        target_band[tgt] = int(b)
    image = np.empty((h, w, 3))
    image[:] = tgt_rgb[band_target[-1]]
    for b in range(cfg.n_bands):
        image[:, b * band_w:(b + 1) * band_w] = tgt_rgb[band_target[b]]
    free_slots = {b: list(rng.permutation(cfg.slots_per_band)) for b in range(cfg.n_bands)}
    geometry = []
    for t in triplets:
        trip = vocab.triplets[t]
        b = target_band[trip.target]
        if not free_slots[b]:
            raise ConfigError(f"band for target {vocab.targets[trip.target]!r} has no free slot")
        s = int(free_slots[b].pop())
        row = s * slot_h + int(rng.integers(0, slot_h - SPRITE + 1))
        col = b * band_w + int(rng.integers(0, band_w - SPRITE + 1))
        sprite = np.empty((SPRITE, SPRITE, 3))
        sprite[:] = inst_rgb[trip.instrument]
        core = np.asarray(_VERB_PATTERNS[trip.verb], dtype=np.float64)[..., None]
        size = SPRITE - 2 * CORE_INSET
        core = np.kron(core, np.ones((size // 4, size // 4, 1)))
        sprite[CORE_INSET:SPRITE - CORE_INSET, CORE_INSET:SPRITE - CORE_INSET] = 0.1 + 0.85 * core
        image[row:row + SPRITE, col:col + SPRITE] = sprite
        geometry.append((t, row, col))
    if cfg.noise:
        image = image + rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), geometry


def _generate_videos(cfg: SyntheticConfig, vocab: TripletVocabulary, seed: int):
    rng = np.random.default_rng(seed)
    probs = prior_probs(cfg, vocab)
    videos = []
    for v in range(cfg.n_videos):
        images, labels, geoms = [], [], []
        for _ in range(cfg.frames_per_video):
            k = int(rng.integers(cfg.min_cooccurrence, cfg.max_cooccurrence + 1))
            trips = sample_triplets(rng, k, probs)
            img, geom = render_scene(trips, vocab, cfg, rng)
            y = np.zeros(vocab.C, dtype=np.uint8)
            y[trips] = 1
            images.append(img)
            labels.append(y)
            geoms.append(geom)
        videos.append((f"VID{v + 1:02d}", images, labels, geoms))
    return videos


def _concat(videos) -> SceneSet:
    images = [im for _, ims, _, _ in videos for im in ims]
    labels = [y for _, _, ys, _ in videos for y in ys]
    vids = [vid for vid, ims, _, _ in videos for _ in ims]
    frames = [k for _, ims, _, _ in videos for k in range(len(ims))]
    geoms = [g for _, _, _, gs in videos for g in gs]
    return SceneSet(np.stack(images), np.stack(labels), vids, np.asarray(frames, dtype=np.int64), geoms)


def generate_dataset(cfg: SyntheticConfig | None = None, seed: int = 0,
                     vocab: TripletVocabulary | None = None) -> SyntheticDataset:
    """Deterministic train/val/test scenes for ``seed``; videos are split contiguously."""
    cfg = cfg or SyntheticConfig()
    vocab = vocab or cfg.load_vocabulary()
    _check_capacity(cfg, vocab)
    videos = _generate_videos(cfg, vocab, seed)
    n_train, n_val, _ = split_counts(cfg.n_videos)
    return SyntheticDataset(_concat(videos[:n_train]), _concat(videos[n_train:n_train + n_val]),
                            _concat(videos[n_train + n_val:]), vocab, cfg, seed)


# -- persistence -------------------------------------------------------------------

def save_dataset(ds: SyntheticDataset, directory) -> list[Path]:
    """Write ``.npy`` arrays and a JSON index; the output is byte-stable per seed."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    index = {"seed": ds.seed, "config": ds.config.to_dict(), "vocabulary": ds.vocab.to_csv(),
             "components": [list(ds.vocab.instruments), list(ds.vocab.verbs), list(ds.vocab.targets)],
             "splits": {}}
    for name in ("train", "val", "test"):
        s = ds.split(name)
        for key in ("images", "labels", "frame_ids"):
            path = out / f"{name}_{key}.npy"
            np.save(path, getattr(s, key), allow_pickle=False)
            written.append(path)
        index["splits"][name] = {"video_ids": s.video_ids, "geometry": s.geometry}
    path = out / "index.json"
    path.write_text(json.dumps(index, sort_keys=True))
    written.append(path)
    return written


def load_dataset(directory) -> SyntheticDataset:
    src = Path(directory)
    try:
        index = json.loads((src / "index.json").read_text())
        cfg = SyntheticConfig.from_dict(index["config"])
        vocab = load_vocabulary(index["vocabulary"], *index["components"])
        splits = {}
        for name in ("train", "val", "test"):
            arrays = {k: np.load(src / f"{name}_{k}.npy", allow_pickle=False)
                      for k in ("images", "labels", "frame_ids")}
            meta = index["splits"][name]
            geometry = [[tuple(g) for g in frame] for frame in meta["geometry"]]
            splits[name] = SceneSet(arrays["images"], arrays["labels"], meta["video_ids"],
                                    arrays["frame_ids"], geometry)
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed dataset directory {src}: {exc}") from None
    return SyntheticDataset(splits["train"], splits["val"], splits["test"], vocab, cfg, int(index["seed"]))
