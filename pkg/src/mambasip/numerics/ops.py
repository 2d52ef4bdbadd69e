"""Differentiable primitives with hand-written backward rules.

Every primitive takes and returns :class:`Tensor`. When a tape is active and an
input is tracked, the primitive appends its backward closure to the tape.
Outputs are checked for NaN/Inf and rejected.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape, as_tensor

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _summary(inputs: Sequence[Tensor]) -> str:
    parts = []
    for t in inputs:
        d = t.data
        finite = np.isfinite(d)
        lo = float(d[finite].min()) if finite.any() else float("nan")
        hi = float(d[finite].max()) if finite.any() else float("nan")
        parts.append(f"shape={d.shape} range=[{lo:.3g}, {hi:.3g}] nonfinite={int((~finite).sum())}")
    return "; ".join(parts)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values ({_summary(inputs)})")
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(op, inputs, result, backward)
    return result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting added to reach ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; ``b`` may be a plain 2-d weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


# --- elementwise unary ----------------------------------------------------

def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _emit
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _emit("softplus", (x,), out, lambda g: (g * _sigmoid(x.data),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _emit("silu", (x,), out, lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = (0.5 * (1.0 + erf(x.data / _SQRT2))).astype(x.dtype, copy=False)
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", (x,), out, backward)


def huber(pred: Tensor, target: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty of ``pred - target``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber: shapes {pred.shape} and {target.shape} differ")
    e = pred.data - target.data
    small = np.abs(e) <= delta
    out = np.where(small, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))

    def backward(g):
        de = g * np.where(small, e, delta * np.sign(e))
        return de, -de

    return _emit("huber", (pred, target), out, backward)


# --- normalisation --------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, backward)


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),) if n else (g,)

    return _emit("layer_norm", (x,), out, backward)


# --- reductions and structure ---------------------------------------------

def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit("mean", (x,), out, backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis % x.ndim)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _emit("sum", (x,), out, backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat along {axis}: shapes {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _emit("concat", xs, out, backward)


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()
    return _emit("flip", (x,), out, lambda g: (np.flip(g, axis=axis).copy(),))


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = (np.s_[:],) * axis + (np.s_[start:stop],)
    out = x.data[idx].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit("slice", (x,), out, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    out = np.swapaxes(x.data, a, b).copy()
    return _emit("swapaxes", (x,), out, lambda g: (np.swapaxes(g, a, b).copy(),))


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along time.

    x is (..., T, C), weight (C, K), bias (C,). Output frame t sees input
    frames t-K+1..t only (zero padding on the left).
    """
    c, k = weight.shape
    if x.shape[-1] != c or bias.shape != (c,):
        raise ShapeError(f"causal_conv1d: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    t_len = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += xp[..., j:j + t_len, :] * weight.data[:, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        flat_g = g.reshape(-1, c)
        for j in range(k):
            gxp[..., j:j + t_len, :] += g * weight.data[:, j]
            gw[:, j] = (xp[..., j:j + t_len, :].reshape(-1, c) * flat_g).sum(axis=0)
        gb = flat_g.sum(axis=0)
        return gxp[..., k - 1:, :], gw, gb

    return _emit("causal_conv1d", (x, weight, bias), out, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (eval mode) or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return _emit("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weights are stored (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
