"""Training loop, run configuration, checkpoints and run evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, load_checkpoint, save_checkpoint
from .encoder import ModelConfig
from .errors import ConfigError, DivergenceError, FormatError, NumericError
from .losses import LossState, class_weights, multitask_combine, total_loss, weighted_bce
from .metrics import EvalReport, PredictionRecord, evaluate
from .models import VARIANTS, TripletModel, build_model
from .synthetic import SceneSet, SyntheticConfig, SyntheticDataset, generate_dataset
from .vocab import decompose_binary

LOG_COLUMNS = ("epoch", "rho", "l_i", "l_v", "l_t", "l_comp", "l_assoc", "l_total")


@dataclass
class RunConfig:
    variant: str = "rdv"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.001
    momentum: float = 0.95
    lr_decay: float = 0.1
    decay_every: int = 50
    warmup_epochs: int | None = None     # None: 18/200 of the epoch budget
    weight_decay: float = 1e-5
    class_weighting: bool = True
    grad_clip: float | None = None       # global gradient-norm ceiling
    log_var_range: tuple[float, float] | None = (-4.0, 4.0)   # projection for the task log-variances
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.data, dict):
            self.data = SyntheticConfig.from_dict(self.data)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and decay_every >= 1 are required")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.log_var_range is not None:
            self.log_var_range = tuple(self.log_var_range)
            if len(self.log_var_range) != 2 or self.log_var_range[0] >= self.log_var_range[1]:
                raise ConfigError("log_var_range must be an increasing (low, high) pair")

    @property
    def warmup(self) -> int:
        return LossState.scaled_warmup(self.epochs) if self.warmup_epochs is None else self.warmup_epochs

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["data"] = self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from None


class SGDMomentum:
    """``v <- mu v - lr g;  p <- p + v``, with optional global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], momentum: float = 0.95, clip: float | None = None):
        self.params = list(params)
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.last_norm = 0.0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params))

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.clip is not None:
            self.last_norm = self.grad_norm()
            if self.last_norm > self.clip:
                scale = self.clip / self.last_norm
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v -= (lr * scale) * p.grad
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    model: TripletModel
    loss_state: LossState
    log: list[dict]
    config: RunConfig

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + ["" if r[k] is None else f"{r[k]:.10e}" for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


def make_loss_state(cfg: RunConfig, ds: SyntheticDataset) -> LossState:
    y = ds.train.labels
    kw = {"warmup_epochs": cfg.warmup, "weight_decay": cfg.weight_decay, "dtype": cfg.model.dtype}
    if cfg.class_weighting:
        y_i, y_v, y_t = decompose_binary(y, ds.vocab)
        kw.update(weights_i=class_weights(y_i), weights_v=class_weights(y_v),
                  weights_t=class_weights(y_t), weights_ivt=class_weights(y))
    return LossState(**kw)


def batch_loss(model: TripletModel, state: LossState, images: np.ndarray, labels: np.ndarray,
               vocab, epoch: int, rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Total loss for one batch plus its logged terms (floats or None)."""
    out = model(Tensor(images.astype(model.cfg.np_dtype)), rng)
    l_assoc = weighted_bce(out.y_ivt, labels, state.weights_ivt)
    terms = {"l_i": None, "l_v": None, "l_t": None, "l_comp": None, "l_assoc": float(l_assoc.data)}
    if not model.has_components:
        # no component heads: the association loss is the whole objective from epoch 0
        terms["rho"] = 1.0
        total = total_loss(None, l_assoc, state.warmup_epochs, model.parameters(), state)
    else:
        y_i, y_v, y_t = decompose_binary(labels, vocab)
        l_i = weighted_bce(out.y_i, y_i, state.weights_i)
        l_v = weighted_bce(out.y_v, y_v, state.weights_v)
        l_t = weighted_bce(out.y_t, y_t, state.weights_t)
        l_comp = multitask_combine(l_i, l_v, l_t, state)
        rho = state.rho(epoch)
        params = model.parameters() if rho > 0 else model.component_parameters()
        total = total_loss(l_comp, l_assoc, epoch, params, state)
        terms.update(rho=rho, l_i=float(l_i.data), l_v=float(l_v.data), l_t=float(l_t.data),
                     l_comp=float(l_comp.data))
    terms["l_total"] = float(total.data)
    return total, terms


def train(cfg: RunConfig, dataset: SyntheticDataset | None = None, log_path=None,
          checkpoint_path=None) -> TrainResult:
    ds = dataset if dataset is not None else generate_dataset(cfg.data, cfg.seed)
    model_cfg = replace(cfg.model, n_instruments=ds.vocab.C_I, n_verbs=ds.vocab.C_V,
                        n_targets=ds.vocab.C_T, n_triplets=ds.vocab.C)
    if tuple(model_cfg.image_hw) != tuple(ds.config.image_hw):
        raise ConfigError(f"model image size {model_cfg.image_hw} != data image size {ds.config.image_hw}")
    cfg = RunConfig.from_dict({**cfg.to_dict(), "model": model_cfg.to_dict()})
    model = build_model(cfg.variant, model_cfg, np.random.default_rng([cfg.seed, 1]))
    state = make_loss_state(cfg, ds)
    params = model.parameters() + (state.parameters() if model.has_components else [])
    opt = SGDMomentum(params, cfg.momentum, cfg.grad_clip)
    train_set = ds.train
    log = []
    model.train()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        n_batches = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, terms = batch_loss(model, state, train_set.images[idx], train_set.labels[idx],
                                             ds.vocab, epoch, rng)
            except NumericError as exc:
                raise DivergenceError(f"non-finite activations at epoch {epoch}, batch {n_batches}: {exc}") from None
            if not math.isfinite(terms["l_total"]):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {n_batches}: {terms}")
            opt.zero_grad()
            backward(loss)
            opt.step(cfg.lr_at(epoch))
            if cfg.log_var_range is not None:
                for w in state.parameters():
                    np.clip(w.data, *cfg.log_var_range, out=w.data)
            for k, v in terms.items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        row = {"epoch": epoch}
        for k in LOG_COLUMNS[1:]:
            row[k] = sums[k] / n_batches if k in sums else None
        log.append(row)
    model.eval()
    result = TrainResult(model, state, log, cfg)
    if log_path is not None:
        Path(log_path).write_text(result.log_csv())
    if checkpoint_path is not None:
        save_run(result, checkpoint_path)
    return result


# -- checkpoints and evaluation ---------------------------------------------------

def save_run(result: TrainResult, path) -> None:
    state = result.model.state_dict()
    for k, t in result.loss_state.log_vars.items():
        state[f"loss.log_var_{k}"] = t.data.copy()
    manifest = {"run": result.config.to_dict(), "variant": result.model.variant,
                "model": result.model.cfg.to_dict()}
    save_checkpoint(path, state, manifest)


def load_run(path) -> tuple[TripletModel, RunConfig]:
    state, manifest = load_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(manifest["run"])
        model_cfg = ModelConfig.from_dict(manifest["model"])
    except (KeyError, ConfigError) as exc:
        raise FormatError(f"checkpoint {path} has an unusable manifest: {exc}") from None
    model = build_model(manifest.get("variant", cfg.variant), model_cfg, 0)
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("loss.")})
    model.eval()
    return model, cfg


def records_for(probs: np.ndarray, scenes: SceneSet) -> list[PredictionRecord]:
    return [PredictionRecord(v, int(f), p, y)
            for v, f, p, y in zip(scenes.video_ids, scenes.frame_ids, probs, scenes.labels)]


def evaluate_model(model: TripletModel, ds: SyntheticDataset, split: str = "test") -> EvalReport:
    scenes = ds.split(split)
    if model.cfg.n_triplets != ds.vocab.C:
        raise FormatError(f"model predicts {model.cfg.n_triplets} triplets, data has {ds.vocab.C}")
    return evaluate(records_for(model.predict(scenes.images), scenes), ds.vocab)


def evaluate_run(checkpoint, split: str = "test", dataset: SyntheticDataset | None = None) -> EvalReport:
    """Evaluate a saved run on a split of its own (regenerated) dataset or of ``dataset``."""
    model, cfg = load_run(checkpoint)
    ds = dataset if dataset is not None else generate_dataset(cfg.data, cfg.seed)
    if tuple(model.cfg.image_hw) != tuple(ds.config.image_hw):
        raise FormatError("checkpoint image size does not match the dataset")
    return evaluate_model(model, ds, split)


def top_table_csv(report: EvalReport, k: int = 10) -> str:
    """Best-recognised triplets with their component and association APs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "triplet", "ap_ivt"])
    for rank, (name, ap) in enumerate(report.top_classes(k, "ivt"), start=1):
        w.writerow([rank, name, f"{ap:.6f}"])
    return buf.getvalue()
