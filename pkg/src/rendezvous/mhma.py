"""Mixed self/cross attention decoder over class-wise feature maps.

Queries come from the triplet map only; keys and values come from the
triplet map (self head) and from the instrument, verb and target maps (cross
heads). Keys and queries are class descriptors (``1 x C_z``) obtained by
global average pooling, values are per-position class maps (``HW x C_z``).
"""
from __future__ import annotations

import json
import math
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Conv2d, LayerNorm, Linear, Module
from .encoder import ModelConfig
from .errors import ContractError, DimensionError


class ProjectionSet(NamedTuple):
    q: Tensor | None   # ... x C (sink only)
    k: Tensor          # ... x C_z
    v: Tensor          # ... x HW x C_z


class Projection(Module):
    """K = FC(GAP(h)), V = conv1x1(h); optionally Q = FC(dropout(GAP(h)))."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float64,
                 want_q: bool = False, q_dropout: float = 0.3):
        self.channels = channels
        self.q_dropout = q_dropout
        self.key = Linear(channels, channels, rng=rng, dtype=dtype)
        self.value = Conv2d(channels, channels, 1, rng=rng, dtype=dtype, gain=1.0)
        self.query = Linear(channels, channels, rng=rng, dtype=dtype) if want_q else None

    def __call__(self, h: Tensor, rng: np.random.Generator | None = None) -> ProjectionSet:
        if h.shape[-1] != self.channels:
            raise DimensionError(f"projection expects {self.channels} channels, got {h.shape[-1]}")
        pooled = ops.global_pool(h, "avg")
        if h.ndim == 3:
            pooled = ops.reshape(pooled, (self.channels,))
        k = self.key(pooled)
        v = self.value(h)
        v = ops.reshape(v, (*v.shape[:-3], v.shape[-3] * v.shape[-2], self.channels))
        q = None
        if self.query is not None:
            q = self.query(ops.dropout(pooled, self.q_dropout, rng, self.training))
        return ProjectionSet(q, k, v)


def project(h: Tensor, projection: Projection, rng=None) -> ProjectionSet:
    return projection(h, rng)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``V . softmax(K^T Q / sqrt(d_K))`` with the softmax over the source classes.

    ``q``: ``... x C``; ``k``: ``... x C_z``; ``v``: ``... x HW x C_z``.
    Returns the ``... x HW x C`` output and the ``... x C_z x C`` weights.
    """
    cz = k.shape[-1]
    if v.shape[-1] != cz:
        raise DimensionError(f"key width {cz} != value width {v.shape[-1]}")
    if q.shape[:-1] != k.shape[:-1] or v.shape[:-2] != k.shape[:-1]:
        raise DimensionError(f"batch extents differ: q {q.shape}, k {k.shape}, v {v.shape}")
    col = ops.reshape(k, (*k.shape, 1))
    row = ops.reshape(q, (*q.shape[:-1], 1, q.shape[-1]))
    weights = ops.softmax(ops.matmul(col, row) * (1.0 / math.sqrt(cz)), axis=-2)
    return ops.matmul(v, weights), weights


HEAD_LAYOUTS = {
    "mixed": ("ivt", "i", "v", "t"),
    "multi-self": ("ivt", "ivt", "ivt", "ivt"),
    "single-self": ("ivt",),
}


class DecoderLayer(Module):
    """Multi-head attention, packed 1x1 mixing conv and AddNorm, then a two-conv
    feed-forward block with its own AddNorm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        C = cfg.n_triplets
        self.sources = HEAD_LAYOUTS[cfg.heads]
        widths = {"ivt": C, "i": cfg.n_instruments, "v": cfg.n_verbs, "t": cfg.n_targets}
        self.sink = Projection(C, rng, dt, want_q=True, q_dropout=cfg.q_dropout)
        # head 0 is always self-attention on the sink; extra self heads get their own K/V
        self.source_proj = [None] + [Projection(widths[s], rng, dt) for s in self.sources[1:]]
        self.mix = Conv2d(len(self.sources) * C, C, 1, rng=rng, dtype=dt, gain=1.0)
        self.norm1 = LayerNorm(C, dt)
        hidden = cfg.ff_hidden or 2 * C
        self.ff1 = Conv2d(C, hidden, 1, rng=rng, dtype=dt)
        self.ff2 = Conv2d(hidden, C, 1, rng=rng, dtype=dt, gain=1.0)
        self.norm2 = LayerNorm(C, dt)
        self.last_weights: list[Tensor] = []

    def __call__(self, h_ivt: Tensor, h_i: Tensor | None, h_v: Tensor | None,
                 h_t: Tensor | None, rng: np.random.Generator | None = None) -> Tensor:
        maps = {"ivt": h_ivt, "i": h_i, "v": h_v, "t": h_t}
        for s in self.sources:
            if maps[s] is None:
                raise ContractError(f"head layout needs the {s!r} context map")
            if maps[s].shape[:-1] != h_ivt.shape[:-1]:
                raise DimensionError(f"context {s!r} grid {maps[s].shape} != triplet grid {h_ivt.shape}")
        sink = self.sink(h_ivt, rng)
        heads, self.last_weights = [], []
        for s, proj in zip(self.sources, self.source_proj):
            src = sink if proj is None else proj(maps[s], rng)
            out, w = scaled_dot_attention(sink.q, src.k, src.v)
            heads.append(ops.reshape(out, h_ivt.shape))
            self.last_weights.append(w)
        packed = heads[0] if len(heads) == 1 else ops.concat(heads, axis=-1)
        h = self.norm1.add_norm(h_ivt, self.mix(packed))
        ff = self.ff2(ops.relu(self.ff1(h)))
        return self.norm2.add_norm(h, ff)


def mhma_layer(h_ivt, h_i, h_v, h_t, layer: DecoderLayer, rng=None) -> Tensor:
    return layer(h_ivt, h_i, h_v, h_t, rng)


class Decoder(Module):
    """``L`` decoder layers with independent parameters; component maps are re-fed to each."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, layers: int | None = None):
        n = cfg.decoder_layers if layers is None else layers
        if n < 1:
            raise ContractError("decoder needs at least one layer")
        self.layers = [DecoderLayer(cfg, rng) for _ in range(n)]

    def __call__(self, h_ivt, h_i, h_v, h_t, rng=None) -> Tensor:
        for layer in self.layers:
            h_ivt = layer(h_ivt, h_i, h_v, h_t, rng)
        return h_ivt

    def attention_weights(self) -> list[list[Tensor]]:
        return [layer.last_weights for layer in self.layers]


def decode(h_ivt, h_i, h_v, h_t, decoder: Decoder, rng=None) -> Tensor:
    return decoder(h_ivt, h_i, h_v, h_t, rng)


class Classifier(Module):
    """Global average pooling followed by an FC layer to ``C`` triplet logits."""

    def __init__(self, channels: int, n_classes: int, rng: np.random.Generator, dtype=np.float64):
        self.fc = Linear(channels, n_classes, rng=rng, dtype=dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc(ops.global_pool(h, "avg"))


def weights_to_json(decoder: Decoder) -> str:
    """Per-layer, per-head attention weights from the last forward pass."""
    return json.dumps([[w.data.tolist() for w in layer] for layer in decoder.attention_weights()])
