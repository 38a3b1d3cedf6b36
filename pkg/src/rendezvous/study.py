"""Synthetic ordering study: every model variant trained on one dataset."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .encoder import ModelConfig
from .metrics import EvalReport
from .models import VARIANTS
from .synthetic import SyntheticConfig, cholect50_prior, generate_dataset
from .train import RunConfig, evaluate_model, train


def study_data_config(power: float = 0.75, **overrides) -> SyntheticConfig:
    """Desk-scale scenes of 100-frame videos with the CholecT50 long-tailed triplet prior."""
    base = SyntheticConfig(**{"frames_per_video": 100, **overrides})
    base.prior = cholect50_prior(base.load_vocabulary(), power)
    return base


def study_run_config(variant: str, data: SyntheticConfig, epochs: int = 100, seed: int = 0) -> RunConfig:
    """The run settings shared by every variant in the study."""
    return RunConfig(variant=variant, model=ModelConfig(decoder_layers=2, dtype="float32"), data=data,
                     epochs=epochs, lr=0.02, grad_clip=1.0, decay_every=1000, seed=seed)


@dataclass
class StudyResult:
    reports: dict[str, EvalReport]
    seconds: dict[str, float] = field(default_factory=dict)

    def map_ivt(self, variant: str) -> float:
        return self.reports[variant].mean_ap["ivt"]

    def ordering_holds(self) -> dict[str, bool]:
        m = {v: self.map_ivt(v) for v in self.reports}
        checks = {}
        if {"naive-cnn", "mtl"} <= set(m):
            checks["naive-cnn < mtl"] = m["naive-cnn"] < m["mtl"]
        if {"mtl", "cagam-tripnet"} <= set(m):
            checks["mtl <= cagam-tripnet"] = m["mtl"] <= m["cagam-tripnet"]
        if {"cagam-tripnet", "rdv"} <= set(m):
            checks["cagam-tripnet <= rdv"] = m["cagam-tripnet"] <= m["rdv"]
        if "rdv" in m:
            checks["rdv >= 0.9"] = m["rdv"] >= 0.9
        if {"rdv", "rdv-self-only"} <= set(m):
            checks["mixed >= self-only"] = m["rdv"] >= m["rdv-self-only"]
        return checks

    def table(self) -> str:
        lines = [f"{'variant':<15}" + "".join(f"{f:>8}" for f in ("i", "v", "t", "iv", "it", "ivt")) + "    time"]
        for v, rep in self.reports.items():
            lines.append(f"{v:<15}" + "".join(f"{rep.mean_ap[f]:8.3f}" for f in ("i", "v", "t", "iv", "it", "ivt"))
                         + f"  {self.seconds.get(v, 0.0):5.0f}s")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"mean_ap": {v: r.mean_ap for v, r in self.reports.items()},
                           "seconds": self.seconds, "ordering": self.ordering_holds()},
                          indent=2, sort_keys=True)


def run_study(variants=VARIANTS, epochs: int = 100, seed: int = 0, data: SyntheticConfig | None = None,
              progress=None) -> StudyResult:
    data = data or study_data_config()
    ds = generate_dataset(data, seed)
    result = StudyResult({})
    for v in variants:
        start = time.perf_counter()
        run = train(study_run_config(v, data, epochs, seed), ds)
        result.reports[v] = evaluate_model(run.model, ds, "test")
        result.seconds[v] = time.perf_counter() - start
        if progress is not None:
            progress(f"{v}: mAP_IVT {result.map_ivt(v):.3f} ({result.seconds[v]:.0f}s)")
    return result

