"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    """Per-input max relative error between autodiff and finite differences."""

    errors: dict[str, float]
    eps: float
    tolerance: float
    checked: int = 0
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_error <= self.tolerance

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(g_ad, g_fd) -> np.ndarray:
    g_ad, g_fd = np.asarray(g_ad, dtype=np.float64), np.asarray(g_fd, dtype=np.float64)
    return np.abs(g_ad - g_fd) / np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare gradients of the scalar ``f()`` w.r.t. ``inputs`` against central differences.

    ``f`` is re-evaluated after perturbing entries of ``inputs`` in place, so it
    must read them afresh on every call. With ``max_entries`` only that many
    randomly chosen entries per input are perturbed.
    """
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(t.name or f"input{k}", t) for k, t in enumerate(inputs)]
    for _, t in named:
        t.requires_grad = True
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in named}

    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    checked = 0
    with no_grad():
        for name, t in named:
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            else:
                idx = np.arange(flat.size)
            worst = 0.0
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                up = f().item()
                flat[k] = orig - eps
                down = f().item()
                flat[k] = orig
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, float(relative_error(analytic[name].reshape(-1)[k], numeric)))
                checked += 1
            errors[name] = worst
    return GradCheckReport(errors=errors, eps=eps, tolerance=tolerance, checked=checked)
