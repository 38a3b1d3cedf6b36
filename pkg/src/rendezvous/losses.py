"""Training objectives: weighted sigmoid cross-entropy, uncertainty-weighted
multi-task combination, and the warm-up gated total loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Tensor, ops
from .errors import ContractError

WEIGHT_DECAY = 1e-5
WARMUP_EPOCHS = 18
REFERENCE_EPOCHS = 200


def weighted_bce(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean over classes (and batch rows) of
    ``-[W_c y log s(z) + (1 - y) log(1 - s(z))]``, in softplus form.

    ``-log s(z) = softplus(-z)`` and ``-log(1 - s(z)) = softplus(z)``.
    """
    y = np.asarray(labels)
    if y.shape != logits.shape:
        raise ContractError(f"labels {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary")
    y = y.astype(logits.dtype)
    w = np.ones(logits.shape[-1], dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    if w.shape != (logits.shape[-1],) or np.any(w <= 0):
        raise ContractError("class weights must be positive and one per class")
    pos = ops.mul(ops.softplus(ops.mul(logits, -1.0)), Tensor(w * y))
    neg = ops.mul(ops.softplus(logits), Tensor(1.0 - y))
    return ops.mean(ops.add(pos, neg))


def class_weights(labels, low: float = 0.1, high: float = 10.0) -> np.ndarray:
    """Inverse-frequency positive weights ``n_neg / n_pos`` clipped to ``[low, high]``.

    Classes without positives get weight 1 (their positive term never fires).
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, np.shape(labels)[-1])
    pos = y.sum(axis=0)
    neg = y.shape[0] - pos
    w = np.ones(y.shape[1])
    has = pos > 0
    w[has] = np.clip(neg[has] / pos[has], low, high)
    return w


@dataclass
class LossState:
    """Learnable task log-variances, class weights and the warm-up schedule."""

    weights_i: np.ndarray | None = None
    weights_v: np.ndarray | None = None
    weights_t: np.ndarray | None = None
    weights_ivt: np.ndarray | None = None
    warmup_epochs: int = WARMUP_EPOCHS
    weight_decay: float = WEIGHT_DECAY
    dtype: str = "float64"
    log_vars: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.log_vars:
            self.log_vars = {k: Tensor(np.zeros(1, dtype=self.dtype), requires_grad=True, name=f"w_{k}")
                             for k in ("i", "v", "t")}

    def rho(self, epoch: int) -> float:
        if epoch < 0:
            raise ContractError("epoch must be >= 0")
        return 0.0 if epoch < self.warmup_epochs else 1.0

    def parameters(self) -> list[Tensor]:
        return list(self.log_vars.values())

    @staticmethod
    def scaled_warmup(epochs: int) -> int:
        """The 18-of-200 warm-up boundary rescaled to an ``epochs`` budget."""
        return int(round(WARMUP_EPOCHS * epochs / REFERENCE_EPOCHS))


def multitask_combine(l_i: Tensor, l_v: Tensor, l_t: Tensor, state: LossState) -> Tensor:
    """``(e^-w_I L_I + e^-w_V L_V + e^-w_T L_T + w_I + w_V + w_T) / 3``."""
    total = None
    for loss, key in ((l_i, "i"), (l_v, "v"), (l_t, "t")):
        w = state.log_vars[key]
        term = ops.add(ops.mul(ops.exp(ops.mul(w, -1.0)), loss), w)
        total = term if total is None else ops.add(total, term)
    return ops.reshape(total * (1.0 / 3.0), ())


def l2_penalty(params: Iterable[Tensor]) -> Tensor | None:
    total = None
    for p in params:
        sq = ops.sum(ops.mul(p, p))
        total = sq if total is None else ops.add(total, sq)
    return total


def total_loss(l_comp: Tensor | None, l_assoc: Tensor | None, epoch: int,
               params: Iterable[Tensor], state: LossState) -> Tensor:
    """``L_comp + rho(epoch) L_assoc + lambda ||params||^2``.

    While ``rho`` is 0 the association term is left out of the graph entirely,
    so parameters that only feed it receive exactly zero gradient; callers
    should pass only the parameters active in the current phase.
    """
    terms = []
    if l_comp is not None:
        terms.append(l_comp)
    if l_assoc is not None and state.rho(epoch) > 0:
        terms.append(ops.mul(l_assoc, state.rho(epoch)))
    if state.weight_decay > 0:
        reg = l2_penalty(params)
        if reg is not None:
            terms.append(ops.mul(reg, state.weight_decay))
    if not terms:
        raise ContractError("total_loss needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return ops.reshape(out, ())
