"""Feature extraction, weakly supervised instrument localisation and the bottleneck."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Conv2d, Module
from .errors import ConfigError, DimensionError


@dataclass
class ModelConfig:
    """Model dimensions.

    Full scale is 256x448 input, 32x56 features, depth 512, 8 decoder layers;
    the defaults here are the desk-scale setting.
    """

    image_hw: tuple[int, int] = (32, 56)
    depth: int = 32                 # backbone output channels D
    low_channels: int = 16          # channels of the early tap X_0
    wsl_channels: int = 64
    bottleneck_channels: int = 256
    n_instruments: int = 6
    n_verbs: int = 10
    n_targets: int = 15
    n_triplets: int = 100
    decoder_layers: int = 8
    heads: str = "mixed"            # mixed | multi-self | single-self
    q_dropout: float = 0.3
    ff_hidden: int | None = None    # defaults to 2 * n_triplets
    dtype: str = "float64"

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        ints = [*self.image_hw, self.depth, self.low_channels, self.wsl_channels,
                self.bottleneck_channels, self.n_instruments, self.n_verbs, self.n_targets,
                self.n_triplets]
        if any(int(v) < 1 for v in ints):
            raise ConfigError("all model extents must be >= 1")
        if self.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if self.heads not in ("mixed", "multi-self", "single-self"):
            raise ConfigError(f"unknown head layout {self.heads!r}")
        if not 0.0 <= self.q_dropout < 1.0:
            raise ConfigError("q_dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def feature_hw(self) -> tuple[int, int]:
        # two stride-2 'same' blocks halve (rounding up) twice; stride-1 blocks keep size
        h, w = self.low_hw
        return -(-h // 2), -(-w // 2)

    @property
    def low_hw(self) -> tuple[int, int]:
        h, w = self.image_hw
        return -(-h // 2), -(-w // 2)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def num_heads(self) -> int:
        return 1 if self.heads == "single-self" else 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def for_vocab(cls, vocab, **overrides) -> "ModelConfig":
        return cls(n_instruments=vocab.C_I, n_verbs=vocab.C_V, n_targets=vocab.C_T,
                   n_triplets=vocab.C, **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """H=W=2 features, two classes per component, four triplets, two layers."""
        base = dict(image_hw=(8, 8), depth=4, low_channels=3, wsl_channels=4,
                    bottleneck_channels=4, n_instruments=2, n_verbs=2, n_targets=2,
                    n_triplets=4, decoder_layers=2, dtype="float64")
        base.update(overrides)
        return cls(**base)


@dataclass
class FeatureBundle:
    x_i: Tensor
    x_v: Tensor
    x_t: Tensor
    x_0: Tensor

    def __post_init__(self):
        if not (self.x_i.shape == self.x_v.shape == self.x_t.shape):
            raise DimensionError("triplicated features must share a shape")


class Backbone(Module):
    """Four 3x3 conv blocks with strides 2, 2, 1, 1 and ReLU.

    X_0 is tapped after the first block; the last block output is triplicated.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.cfg = cfg
        self.blocks = [
            Conv2d(3, cfg.low_channels, 3, stride=2, rng=rng, dtype=dt),
            Conv2d(cfg.low_channels, cfg.depth, 3, stride=2, rng=rng, dtype=dt),
            Conv2d(cfg.depth, cfg.depth, 3, stride=1, rng=rng, dtype=dt),
            Conv2d(cfg.depth, cfg.depth, 3, stride=1, rng=rng, dtype=dt),
        ]

    def __call__(self, image: Tensor) -> FeatureBundle:
        if tuple(image.shape[-3:]) != (*self.cfg.image_hw, 3):
            raise DimensionError(f"expected image {(*self.cfg.image_hw, 3)}, got {image.shape[-3:]}")
        h = ops.relu(self.blocks[0](ops.mul(ops.add(image, -0.5), 4.0)))
        x0 = h
        for block in self.blocks[1:]:
            h = ops.relu(block(h))
        return FeatureBundle(h, h, h, x0)


def extract_features(image: Tensor, backbone: Backbone) -> FeatureBundle:
    return backbone(image)


class WSL(Module):
    """3x3 conv + ReLU, then a 1x1 conv to instrument class maps; logits by max pooling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.conv = Conv2d(cfg.depth, cfg.wsl_channels, 3, rng=rng, dtype=dt)
        self.cam = Conv2d(cfg.wsl_channels, cfg.n_instruments, 1, rng=rng, dtype=dt, gain=1.0)

    def __call__(self, x_i: Tensor) -> tuple[Tensor, Tensor]:
        h_i = self.cam(ops.relu(self.conv(x_i)))
        return h_i, ops.global_pool(h_i, "max")


def wsl_forward(x_i: Tensor, wsl: WSL) -> tuple[Tensor, Tensor]:
    return wsl(x_i)


class Bottleneck(Module):
    """3x3 conv + ReLU then 1x1 conv to C triplet channels, on resampled X_0."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.hw = cfg.feature_hw
        self.conv = Conv2d(cfg.low_channels, cfg.bottleneck_channels, 3, rng=rng, dtype=dt)
        self.proj = Conv2d(cfg.bottleneck_channels, cfg.n_triplets, 1, rng=rng, dtype=dt, gain=1.0)

    def __call__(self, x_0: Tensor) -> Tensor:
        x = ops.resample_nearest(x_0, *self.hw)
        return self.proj(ops.relu(self.conv(x)))


def bottleneck_forward(x_0: Tensor, bottleneck: Bottleneck) -> Tensor:
    return bottleneck(x_0)


# -- localisation boxes ---------------------------------------------------------

class Box(NamedTuple):
    class_id: int
    box: tuple[float, float, float, float]   # x0, y0, x1, y1 in image pixels
    score: float


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labelling; labels start at 1 in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    labels = np.zeros(mask.shape, dtype=np.int64)
    H, W = mask.shape
    n = 0
    for r in range(H):
        for c in range(W):
            if not mask[r, c] or labels[r, c]:
                continue
            n += 1
            labels[r, c] = n
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < H and 0 <= xx < W and mask[yy, xx] and not labels[yy, xx]:
                        labels[yy, xx] = n
                        queue.append((yy, xx))
    return labels, n


def box_masks(h_i, threshold: float = 0.5) -> np.ndarray:
    """Sigmoid-normalised class maps binarised at ``threshold`` (``H x W x C`` bool)."""
    h = np.asarray(h_i.data if isinstance(h_i, Tensor) else h_i, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-h)) >= threshold


def extract_boxes(h_i, threshold: float = 0.5, image_hw: tuple[int, int] | None = None) -> list[Box]:
    """One box per connected above-threshold region of each instrument map.

    Boxes are tight in feature cells, then scaled to ``image_hw`` (defaults to
    the feature grid itself). Score is the region's peak sigmoid value.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    h = np.asarray(h_i.data if isinstance(h_i, Tensor) else h_i, dtype=np.float64)
    if h.ndim != 3:
        raise DimensionError(f"expected H x W x C_I maps, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("class maps must be finite")
    H, W, C = h.shape
    sy, sx = (1.0, 1.0) if image_hw is None else (image_hw[0] / H, image_hw[1] / W)
    prob = 1.0 / (1.0 + np.exp(-h))
    boxes = []
    for c in range(C):
        labels, n = label_components(prob[:, :, c] >= threshold)
        for k in range(1, n + 1):
            rows, cols = np.nonzero(labels == k)
            boxes.append(Box(c, (cols.min() * sx, rows.min() * sy, (cols.max() + 1) * sx,
                                 (rows.max() + 1) * sy), float(prob[rows, cols, c].max())))
    return boxes
