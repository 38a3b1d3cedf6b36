"""Class-activation-guided attention for verbs (channel) and targets (position).

Both branches remap their input features to ``C_I`` context channels ``X_Z``,
build a non-discriminative affinity from ``X_Z`` and a discriminative one from
the instrument class maps, and add ``beta * attended(X_Z)`` back onto ``X_Z``.
"""
from __future__ import annotations

import json
import math
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Conv2d, Module
from .encoder import ModelConfig
from .errors import DimensionError


class AttentionOutput(NamedTuple):
    enhanced: Tensor        # E, same shape as the context X_Z
    attention: Tensor | None
    context: Tensor         # X_Z


def _flatten_spatial(x: Tensor) -> Tensor:
    return ops.reshape(x, (*x.shape[:-3], x.shape[-3] * x.shape[-2], x.shape[-1]))


class _GuidedAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, guided: bool = True):
        dt = cfg.np_dtype
        ci = cfg.n_instruments
        self.guided = guided
        self.n_cam = ci
        self.remap = Conv2d(cfg.depth, ci, 1, rng=rng, dtype=dt, gain=1.0)
        if guided:
            self.q_ctx = Conv2d(ci, ci, 1, rng=rng, dtype=dt, gain=1.0)
            self.k_ctx = Conv2d(ci, ci, 1, rng=rng, dtype=dt, gain=1.0)
            self.q_cam = Conv2d(ci, ci, 1, rng=rng, dtype=dt, gain=1.0)
            self.k_cam = Conv2d(ci, ci, 1, rng=rng, dtype=dt, gain=1.0)
            # learnable temperature; zero start = unguided identity path
            self.beta = Tensor(np.zeros(1, dtype=dt), requires_grad=True)
        h, w = cfg.feature_hw
        self.xi = self._scale(h * w, ci)

    def _scale(self, hw: int, ci: int) -> float:
        raise NotImplementedError

    def _affinity(self, q: Tensor, k: Tensor) -> Tensor:
        raise NotImplementedError

    def _attend(self, v: Tensor, a: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, h_i: Tensor) -> AttentionOutput:
        if x.shape[:-1] != h_i.shape[:-1]:
            raise DimensionError(f"feature {x.shape} and class-map {h_i.shape} grids differ")
        if h_i.shape[-1] != self.n_cam:
            raise DimensionError(f"class maps need {self.n_cam} channels, got {h_i.shape[-1]}")
        xz = self.remap(x)
        if not self.guided:
            return AttentionOutput(xz, None, xz)
        p_free = self._affinity(_flatten_spatial(self.q_ctx(xz)), _flatten_spatial(self.k_ctx(xz)))
        p_disc = self._affinity(_flatten_spatial(self.q_cam(h_i)), _flatten_spatial(self.k_cam(h_i)))
        a = ops.softmax(ops.mul(p_disc, p_free) * (1.0 / self.xi), axis=-1)
        enhancement = ops.reshape(self._attend(_flatten_spatial(xz), a), xz.shape)
        return AttentionOutput(ops.add(ops.mul(self.beta, enhancement), xz), a, xz)


class ChannelAttention(_GuidedAttention):
    """Affinities ``Q^T K`` over instrument channels (``C_I x C_I``); ``E = beta V A + X_Z``."""

    def _scale(self, hw, ci):
        return math.sqrt(hw)

    def _affinity(self, q, k):
        return ops.matmul(ops.swap_last(q), k)

    def _attend(self, v, a):
        return ops.matmul(v, a)


class PositionAttention(_GuidedAttention):
    """Affinities ``Q K^T`` over positions (``HW x HW``); ``E = beta A V + X_Z``."""

    def _scale(self, hw, ci):
        return math.sqrt(ci)

    def _affinity(self, q, k):
        return ops.matmul(q, ops.swap_last(k))

    def _attend(self, v, a):
        return ops.matmul(a, v)


class ClassHead(Module):
    """1x1 conv to per-class maps, logits by global average pooling."""

    def __init__(self, cin: int, n_classes: int, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv2d(cin, n_classes, 1, rng=rng, dtype=dtype, gain=1.0)

    def __call__(self, e: Tensor) -> tuple[Tensor, Tensor]:
        maps = self.conv(e)
        return maps, ops.global_pool(maps, "avg")


class CAGAM(Module):
    """Verb and target detection guided by instrument class maps.

    With ``guided=False`` both branches reduce to the remapped context, which
    is the attention-free multi-task baseline.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, guided: bool = True):
        dt = cfg.np_dtype
        # one stream per part keeps the shared parts identical whether or not guidance is built
        streams = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=4)]
        self.channel = ChannelAttention(cfg, streams[0], guided)
        self.position = PositionAttention(cfg, streams[1], guided)
        self.verb_head = ClassHead(cfg.n_instruments, cfg.n_verbs, streams[2], dt)
        self.target_head = ClassHead(cfg.n_instruments, cfg.n_targets, streams[3], dt)

    def __call__(self, x_v: Tensor, x_t: Tensor, h_i: Tensor) -> dict:
        verb = self.channel(x_v, h_i)
        target = self.position(x_t, h_i)
        h_v, y_v = self.verb_head(verb.enhanced)
        h_t, y_t = self.target_head(target.enhanced)
        return {"h_v": h_v, "y_v": y_v, "h_t": h_t, "y_t": y_t,
                "a_channel": verb.attention, "a_position": target.attention}


def attention_to_json(a: Tensor | np.ndarray) -> str:
    """Dump attention grids (``... x rows x cols``) as nested JSON lists."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return json.dumps({"shape": list(arr.shape), "values": arr.tolist()})


def attention_to_csv(a: Tensor | np.ndarray) -> str:
    """One 2-D attention grid as CSV rows."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim != 2:
        raise DimensionError("CSV export needs a single 2-D attention map")
    return "\n".join(",".join(repr(float(v)) for v in row) for row in arr) + "\n"
