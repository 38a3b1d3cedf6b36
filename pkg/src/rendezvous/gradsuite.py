"""Finite-difference gradient suite over every primitive and the composed blocks.

Each check contracts the block output with a fixed random tensor so every
output entry contributes to the scalar being differentiated.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad_check, ops
from .autodiff.nn import Module
from .cagam import CAGAM
from .encoder import ModelConfig
from .losses import LossState, multitask_combine, total_loss, weighted_bce
from .mhma import DecoderLayer
from .models import build_model


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float
    entries: int

    def passed(self, tolerance: float) -> bool:
        return self.max_error <= tolerance


@dataclass
class SuiteReport:
    tolerance: float
    eps: float
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tolerance) for r in self.results)

    def by_check(self) -> dict[str, tuple[int, float]]:
        """``name -> (seeds run, worst error)``."""
        out: dict[str, tuple[int, float]] = {}
        for r in self.results:
            n, worst = out.get(r.name, (0, 0.0))
            out[r.name] = (n + 1, max(worst, r.max_error))
        return out

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed(self.tolerance)]

    def summary(self) -> str:
        lines = [f"{'check':<22}{'seeds':>6}{'max rel err':>14}  status"]
        for name, (n, worst) in self.by_check().items():
            lines.append(f"{name:<22}{n:>6}{worst:>14.3e}  {'ok' if worst <= self.tolerance else 'FAIL'}")
        lines.append(f"{'all' if self.passed else 'some'} checks {'passed' if self.passed else 'FAILED'} "
                     f"in {self.seconds:.1f}s (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _leaf(rng, *shape, away_from_zero: bool = False, positive: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _contract(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(r)))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """``name -> (f(*inputs) -> Tensor, inputs)`` for each differentiable primitive."""
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    pos = _leaf(rng, 2, 3, positive=True)
    kink = _leaf(rng, 2, 3, away_from_zero=True)
    vec = _leaf(rng, 3)
    img = _leaf(rng, 2, 5, 4, 3)
    w3 = _leaf(rng, 3, 3, 3, 4)
    w1 = _leaf(rng, 1, 1, 3, 4)
    bias = _leaf(rng, 4)
    bmat = _leaf(rng, 2, 3, 4)
    rmat = _leaf(rng, 2, 4, 5)
    mat2 = _leaf(rng, 4, 5)
    feat = _leaf(rng, 3, 4)
    gamma, beta = _leaf(rng, 4), _leaf(rng, 4)
    # distinct magnitudes keep the max-pool argmax well separated
    pool_in = Tensor(rng.permutation(np.arange(2 * 3 * 3 * 2)).reshape(2, 3, 3, 2) * 0.1 + 0.01
                     * rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
    drop_seed = int(rng.integers(1 << 30))
    return {
        "add": (ops.add, [a, b]),
        "add_broadcast": (ops.add, [a, vec]),
        "sub": (ops.sub, [a, b]),
        "mul": (ops.mul, [a, b]),
        "mul_broadcast": (ops.mul, [a, vec]),
        "div": (ops.div, [a, pos]),
        "power": (lambda x: ops.power(x, 2.5), [pos]),
        "exp": (ops.exp, [a]),
        "log": (ops.log, [pos]),
        "relu": (ops.relu, [kink]),
        "sigmoid": (ops.sigmoid, [a]),
        "softplus": (ops.softplus, [a]),
        "sum_axis": (lambda x: ops.sum(x, axis=0), [a]),
        "mean_axis": (lambda x: ops.mean(x, axis=1, keepdims=True), [a]),
        "reshape": (lambda x: ops.reshape(x, (3, 2)), [a]),
        "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), [bmat]),
        "swap_last": (ops.swap_last, [bmat]),
        "concat": (lambda x, y: ops.concat([x, y], axis=0), [a, b]),
        "getitem": (lambda x: ops.getitem(x, (slice(None), [0, 2, 2])), [a]),
        "matmul_batched": (ops.matmul, [bmat, rmat]),
        "matmul_shared": (ops.matmul, [bmat, mat2]),
        "linear": (ops.linear, [feat, mat2, _leaf(rng, 5)]),
        "conv3x3_same": (lambda x, w, c: ops.conv2d(x, w, c), [img, w3, bias]),
        "conv3x3_stride2": (lambda x, w: ops.conv2d(x, w, None, stride=2), [img, w3]),
        "conv3x3_valid": (lambda x, w: ops.conv2d(x, w, None, padding="valid"), [img, w3]),
        "conv1x1": (lambda x, w, c: ops.conv2d(x, w, c), [img, w1, bias]),
        "softmax_last": (lambda x: ops.softmax(x, axis=-1), [bmat]),
        "softmax_rows": (lambda x: ops.softmax(x, axis=-2), [bmat]),
        "gap": (lambda x: ops.global_pool(x, "avg"), [img]),
        "gmp": (lambda x: ops.global_pool(x, "max"), [pool_in]),
        "layer_norm": (lambda x, g, c: ops.layer_norm(x, g, c), [feat, gamma, beta]),
        "add_norm": (lambda x, y, g, c: ops.add_norm(x, y, g, c), [feat, _leaf(rng, 3, 4), gamma, beta]),
        "dropout": (lambda x: ops.dropout(x, 0.3, np.random.default_rng(drop_seed), True), [a]),
        "resample_nearest": (lambda x: ops.resample_nearest(x, 3, 5), [img]),
    }


def _check(name: str, f: Callable[[], Tensor], inputs, seed: int, eps: float, tolerance: float,
           max_entries: int | None = None) -> CheckResult:
    rep = grad_check(f, inputs, eps=eps, tolerance=tolerance, max_entries=max_entries,
                     rng=np.random.default_rng(seed))
    return CheckResult(name, seed, rep.max_error, rep.checked)


def _params(module: Module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def check_primitives(seed: int, eps: float, tolerance: float) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 0])
    out = []
    for name, (fn, inputs) in primitive_cases(rng).items():
        with_probe = fn(*inputs)
        r = rng.normal(size=with_probe.shape)
        out.append(_check(name, lambda fn=fn, inputs=inputs, r=r: _contract(fn(*inputs), r),
                          inputs, seed, eps, tolerance))
    return out


def check_cagam(seed: int, cfg: ModelConfig, eps: float, tolerance: float) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    block = CAGAM(cfg, rng, guided=True)
    # a non-zero beta so the attention path carries gradient
    for branch in (block.channel, block.position):
        branch.beta.data[:] = rng.normal(size=1)
    h, w = cfg.feature_hw
    x_v, x_t = _leaf(rng, 2, h, w, cfg.depth), _leaf(rng, 2, h, w, cfg.depth)
    h_i = _leaf(rng, 2, h, w, cfg.n_instruments)
    probe = block(x_v, x_t, h_i)
    rs = {k: rng.normal(size=probe[k].shape) for k in ("h_v", "h_t", "a_channel", "a_position")}

    def f():
        o = block(x_v, x_t, h_i)
        terms = [_contract(o[k], r) for k, r in rs.items()]
        return ops.add(ops.add(terms[0], terms[1]), ops.add(terms[2], terms[3]))

    inputs = {"x_v": x_v, "x_t": x_t, "h_i": h_i, **_params(block)}
    return _check("cagam", f, inputs, seed, eps, tolerance)


def check_mhma(seed: int, cfg: ModelConfig, eps: float, tolerance: float) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    layer = DecoderLayer(cfg, rng).eval()
    h, w = cfg.feature_hw
    maps = {"h_ivt": _leaf(rng, 2, h, w, cfg.n_triplets), "h_i": _leaf(rng, 2, h, w, cfg.n_instruments),
            "h_v": _leaf(rng, 2, h, w, cfg.n_verbs), "h_t": _leaf(rng, 2, h, w, cfg.n_targets)}
    r = rng.normal(size=maps["h_ivt"].shape)

    def f():
        return _contract(layer(maps["h_ivt"], maps["h_i"], maps["h_v"], maps["h_t"]), r)

    return _check("mhma_layer", f, {**maps, **_params(layer)}, seed, eps, tolerance)


def check_loss_stack(seed: int, cfg: ModelConfig, eps: float, tolerance: float) -> CheckResult:
    rng = np.random.default_rng([seed, 3])
    state = LossState(weights_i=rng.uniform(0.5, 3, cfg.n_instruments), weights_ivt=rng.uniform(0.5, 3, cfg.n_triplets),
                      warmup_epochs=1, weight_decay=0.1)
    for w in state.parameters():
        w.data[:] = rng.normal(scale=0.5, size=1)
    logits = {k: _leaf(rng, 3, n) for k, n in (("y_i", cfg.n_instruments), ("y_v", cfg.n_verbs),
                                               ("y_t", cfg.n_targets), ("y_ivt", cfg.n_triplets))}
    labels = {k: (rng.random(t.shape) < 0.4).astype(np.float64) for k, t in logits.items()}
    extra = _leaf(rng, 4, 3)

    def f():
        l_comp = multitask_combine(weighted_bce(logits["y_i"], labels["y_i"], state.weights_i),
                                   weighted_bce(logits["y_v"], labels["y_v"]),
                                   weighted_bce(logits["y_t"], labels["y_t"]), state)
        l_assoc = weighted_bce(logits["y_ivt"], labels["y_ivt"], state.weights_ivt)
        return total_loss(l_comp, l_assoc, 1, [extra], state)

    inputs = {**logits, "param": extra, **{f"w_{k}": t for k, t in state.log_vars.items()}}
    return _check("loss_stack", f, inputs, seed, eps, tolerance)


def check_end_to_end(seed: int, cfg: ModelConfig, eps: float, tolerance: float,
                     max_entries: int = 3) -> CheckResult:
    """Full rdv model plus its training loss on the tiny config (sampled entries)."""
    rng = np.random.default_rng([seed, 4])
    model = build_model("rdv", cfg, rng).eval()
    for branch in (model.cagam.channel, model.cagam.position):
        branch.beta.data[:] = rng.normal(size=1)
    state = LossState(warmup_epochs=0)
    image = Tensor(rng.uniform(size=(2, *cfg.image_hw, 3)), requires_grad=True)
    y = (rng.random((2, cfg.n_triplets)) < 0.4).astype(np.float64)
    y_i, y_v, y_t = [(rng.random((2, n)) < 0.4).astype(np.float64)
                     for n in (cfg.n_instruments, cfg.n_verbs, cfg.n_targets)]

    def f():
        o = model(image)
        l_comp = multitask_combine(weighted_bce(o.y_i, y_i), weighted_bce(o.y_v, y_v),
                                   weighted_bce(o.y_t, y_t), state)
        return total_loss(l_comp, weighted_bce(o.y_ivt, y), 1, model.parameters(), state)

    inputs = {"image": image, **_params(model), **{f"w_{k}": t for k, t in state.log_vars.items()}}
    return _check("end_to_end", f, inputs, seed, eps, tolerance, max_entries)


def run_suite(seeds: int = 100, cfg: ModelConfig | None = None, eps: float = 1e-5,
              tolerance: float = 1e-4, end_to_end_seeds: int = 10,
              progress: Callable[[str], None] | None = None) -> SuiteReport:
    """Primitives, CAGAM, MHMA layer and loss stack for ``seeds`` seeds, plus
    ``end_to_end_seeds`` sampled checks of the whole model, all at 64-bit."""
    cfg = replace(cfg or ModelConfig.tiny(), dtype="float64")
    report = SuiteReport(tolerance, eps)
    start = time.perf_counter()
    for seed in range(seeds):
        report.results.extend(check_primitives(seed, eps, tolerance))
        report.results.append(check_cagam(seed, cfg, eps, tolerance))
        report.results.append(check_mhma(seed, cfg, eps, tolerance))
        report.results.append(check_loss_stack(seed, cfg, eps, tolerance))
        if seed < end_to_end_seeds:
            report.results.append(check_end_to_end(seed, cfg, eps, tolerance))
        if progress is not None:
            progress(f"seed {seed + 1}/{seeds}")
    report.seconds = time.perf_counter() - start
    return report
