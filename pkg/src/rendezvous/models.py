"""End-to-end model variants sharing one backbone design.

``naive-cnn``      backbone, GAP, FC to triplets (no component heads)
``mtl``            component heads without attention guidance, fusion head for triplets
``cagam-tripnet``  guided component heads, fusion head for triplets
``rdv-self-only``  guided component heads, decoder with self-attention heads only
``rdv``            guided component heads, decoder with mixed self/cross heads
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.nn import Conv2d, Linear, Module
from .cagam import CAGAM
from .encoder import WSL, Backbone, Bottleneck, ModelConfig
from .errors import ConfigError
from .mhma import Classifier, Decoder

VARIANTS = ("naive-cnn", "mtl", "cagam-tripnet", "rdv-self-only", "rdv")


@dataclass
class ModelOutput:
    y_ivt: Tensor
    y_i: Tensor | None = None
    y_v: Tensor | None = None
    y_t: Tensor | None = None
    h_i: Tensor | None = None
    h_v: Tensor | None = None
    h_t: Tensor | None = None
    a_channel: Tensor | None = None
    a_position: Tensor | None = None

    @property
    def has_components(self) -> bool:
        return self.y_i is not None


class FusionHead(Module):
    """Concatenated class maps, 1x1 conv + ReLU, GAP, FC to triplet logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        cin = cfg.n_instruments + cfg.n_verbs + cfg.n_targets + cfg.n_triplets
        self.mix = Conv2d(cin, cfg.n_triplets, 1, rng=rng, dtype=dt)
        self.fc = Linear(cfg.n_triplets, cfg.n_triplets, rng=rng, dtype=dt)

    def __call__(self, maps: list[Tensor]) -> Tensor:
        h = ops.relu(self.mix(ops.concat(maps, axis=-1)))
        return self.fc(ops.global_pool(h, "avg"))


def module_streams(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent generators per sub-module, so a module's initial weights do
    not depend on which other modules the variant builds."""
    return [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=n)]


class TripletModel(Module):
    def __init__(self, variant: str, cfg: ModelConfig, rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; choose from {VARIANTS}")
        if variant == "rdv-self-only" and cfg.heads == "mixed":
            cfg = replace(cfg, heads="multi-self")
        if variant == "rdv" and cfg.heads != "mixed":
            raise ConfigError("the rdv variant uses mixed heads; use rdv-self-only for self-attention")
        self.variant = variant
        self.cfg = cfg
        dt = cfg.np_dtype
        s_backbone, s_head, s_cagam, s_bottleneck, s_assoc, s_classifier = module_streams(rng, 6)
        self.backbone = Backbone(cfg, s_backbone)
        if variant == "naive-cnn":
            self.head = Linear(cfg.depth, cfg.n_triplets, rng=s_head, dtype=dt)
            return
        self.wsl = WSL(cfg, s_head)
        self.cagam = CAGAM(cfg, s_cagam, guided=variant != "mtl")
        self.bottleneck = Bottleneck(cfg, s_bottleneck)
        if variant.startswith("rdv"):
            self.decoder = Decoder(cfg, s_assoc)
            self.classifier = Classifier(cfg.n_triplets, cfg.n_triplets, s_classifier, dt)
        else:
            self.fusion = FusionHead(cfg, s_assoc)

    @property
    def has_components(self) -> bool:
        return self.variant != "naive-cnn"

    def assoc_modules(self) -> list[Module]:
        """Sub-modules whose parameters feed the association loss only."""
        if not self.has_components:
            return [self.head]
        if self.variant.startswith("rdv"):
            return [self.bottleneck, self.decoder, self.classifier]
        return [self.bottleneck, self.fusion]

    def assoc_parameters(self) -> list[Tensor]:
        return [p for m in self.assoc_modules() for p in m.parameters()]

    def component_parameters(self) -> list[Tensor]:
        assoc = {id(p) for p in self.assoc_parameters()}
        return [p for p in self.parameters() if id(p) not in assoc]

    def __call__(self, images: Tensor, rng: np.random.Generator | None = None) -> ModelOutput:
        f = self.backbone(images)
        if not self.has_components:
            return ModelOutput(self.head(ops.global_pool(f.x_i, "avg")))
        h_i, y_i = self.wsl(f.x_i)
        c = self.cagam(f.x_v, f.x_t, h_i)
        h_ivt = self.bottleneck(f.x_0)
        if self.variant.startswith("rdv"):
            y_ivt = self.classifier(self.decoder(h_ivt, h_i, c["h_v"], c["h_t"], rng))
        else:
            y_ivt = self.fusion([h_i, c["h_v"], c["h_t"], h_ivt])
        return ModelOutput(y_ivt, y_i, c["y_v"], c["y_t"], h_i, c["h_v"], c["h_t"],
                           c["a_channel"], c["a_position"])

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Triplet probabilities for ``N x H x W x 3`` images, in eval mode without a graph."""
        from .autodiff import no_grad

        was_training = self.training
        self.eval()
        out = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                logits = self(Tensor(np.asarray(images[s:s + batch_size], dtype=self.cfg.np_dtype))).y_ivt
                out.append(1.0 / (1.0 + np.exp(-logits.data.astype(np.float64))))
        if was_training:
            self.train()
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.n_triplets))


def build_model(variant: str, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> TripletModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TripletModel(variant, cfg, rng)
