"""Differentiable primitives.

Broadcasting is limited to scalars and trailing-axis (bias style) operands;
anything else raises :class:`DimensionError`. Image-like tensors are
channels-last: ``H x W x C`` or batched ``B x H x W x C``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    for small, big in ((a, b), (b, a)):
        if int(np.prod(small)) == 1 and len(small) <= len(big):
            return
        if len(small) < len(big) and big[len(big) - len(small):] == small:
            return
    raise DimensionError(f"incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape),
                                  _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_result(ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- reductions and shape ops -------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result(a.data[index], (a,), back)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when leading extents agree (or ``b`` is 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if a.ndim < b.ndim:
        raise DimensionError(f"matmul left operand must carry the batch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if gb.ndim > bd.ndim:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return make_result(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (*lead, weight.shape[1])) if x.ndim != 2 else out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Channels-last 2-D cross-correlation.

    ``x``: ``H x W x Cin`` or ``B x H x W x Cin``; ``w``: ``kh x kw x Cin x Cout``.
    'same' pads by ``(k - 1) // 2`` so stride 1 preserves spatial extents.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be kh x kw x Cin x Cout, got {w.shape}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape[-1]} vs kernel {cin}")
    if padding not in ("same", "valid"):
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    xd = x.data if x.ndim == 4 else x.data[None]
    B, H, W, _ = xd.shape
    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if padding == "same" else (0, 0)
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    wmat = w.data.reshape(kh * kw * cin, cout)
    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = xd.reshape(-1, cin)
    else:
        xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', Cin, kh, kw
        win = win[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = cols @ wmat
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        out = out + b.data
    out = out.reshape(B, Ho, Wo, cout)
    if x.ndim == 3:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)
    xshape = x.shape

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = g2 @ wmat.T
        if pointwise:
            gx = gcols.reshape(xshape)
        else:
            gcols = gcols.reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros((B, H + 2 * ph, W + 2 * pw, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, ph:ph + H, pw:pw + W, :].reshape(xshape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, parents, back)


# -- normalisation, pooling, attention helpers --------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), back)


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Spatial reduction of ``H x W x C`` (-> ``1 x C``) or ``B x H x W x C`` (-> ``B x C``).

    In max mode the gradient goes to the first maximal element in row-major order.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_pool expects 3-D or 4-D input, got {x.shape}")
    xd = x.data if x.ndim == 4 else x.data[None]
    B, H, W, C = xd.shape
    flat = xd.reshape(B, H * W, C)
    if mode == "avg":
        out = flat.mean(axis=1)

        def back(g):
            return (np.broadcast_to(g[:, None, :] / (H * W), flat.shape).reshape(x.shape).copy(),)
    elif mode == "max":
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

        def back(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, idx[:, None, :], g[:, None, :], axis=1)
            return (gf.reshape(x.shape),)
    else:
        raise ContractError(f"unknown pooling mode {mode!r}")
    return make_result(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last (channel) axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm scale/shift must have shape ({C},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    red = tuple(range(x.ndim - 1))

    def back(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), back)


def add_norm(residual: Tensor, sublayer_out: Tensor, gamma: Tensor, beta: Tensor,
             eps: float = LAYER_NORM_EPS) -> Tensor:
    if residual.shape != sublayer_out.shape:
        raise DimensionError(f"add_norm shapes differ: {residual.shape} vs {sublayer_out.shape}")
    return layer_norm(add(residual, sublayer_out), gamma, beta, eps)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def resample_nearest(x: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbour resize of the two spatial axes (``..., H, W, C``)."""
    H, W = x.shape[-3], x.shape[-2]
    if (H, W) == (height, width):
        return x
    rows = (np.arange(height) * H) // height
    cols = (np.arange(width) * W) // width
    lead = (slice(None),) * (x.ndim - 3)
    return getitem(x, lead + (rows[:, None], cols[None, :]))
