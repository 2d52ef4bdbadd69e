"""Selective state-space scan.

Per channel d the hidden state h_d (N values) follows

    h_t = exp(delta_t * A_d) * h_{t-1} + (delta_t * B_t) * x_t
    y_t = C_t . h_t + D_d * x_t

with B_t, C_t, delta_t computed from x_t. A is diagonal per channel and
stored as ``a_log`` (A = -exp(a_log)). Two equivalent evaluators are given:
a sequential recurrence and a Blelloch prefix scan over the associative
combinator on (decay, input) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import NonFiniteError, ShapeError, Tensor, active_tape, ops
from .numerics.ops import _emit


@dataclass
class SelectiveSsmParams:
    a_log: np.ndarray       # (D, N)
    w_b: np.ndarray         # (D, N): B_t = x_t @ w_b
    w_c: np.ndarray         # (D, N)
    w_dt_down: np.ndarray   # (D, R)
    w_dt_up: np.ndarray     # (R, D)
    dt_bias: np.ndarray     # (D,)
    d_skip: np.ndarray | None = None  # (D,), None reproduces y_t = C_t h_t exactly

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor | np.ndarray]) -> "SelectiveSsmParams":
        get = lambda k: np.asarray(params[k].data if isinstance(params[k], Tensor) else params[k])  # noqa: E731
        return cls(
            a_log=get("a_log"), w_b=get("w_b"), w_c=get("w_c"),
            w_dt_down=get("w_dt_down"), w_dt_up=get("w_dt_up"), dt_bias=get("dt_bias"),
            d_skip=get("d_skip") if "d_skip" in params else None,
        )


def dt_rank_for(d_model: int) -> int:
    return math.ceil(d_model / 16)


def init_ssm(rng: np.random.Generator, d_inner: int, d_state: int, dt_rank: int,
             dt_min: float = 1e-3, dt_max: float = 0.1, d_skip: bool = True) -> dict[str, np.ndarray]:
    """Reference-style initialisation: A_d = -(1..N), softplus(dt_bias) log-uniform in [dt_min, dt_max]."""
    bound = 1.0 / math.sqrt(d_inner)
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
    p = {
        "a_log": np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))),
        "w_b": rng.uniform(-bound, bound, (d_inner, d_state)),
        "w_c": rng.uniform(-bound, bound, (d_inner, d_state)),
        "w_dt_down": rng.uniform(-bound, bound, (d_inner, dt_rank)),
        "w_dt_up": rng.uniform(-dt_rank ** -0.5, dt_rank ** -0.5, (dt_rank, d_inner)),
        # inverse softplus
        "dt_bias": dt + np.log(-np.expm1(-dt)),
    }
    if d_skip:
        p["d_skip"] = np.ones(d_inner)
    return p


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v).astype(v.dtype, copy=False)


def selective_params(x_t: np.ndarray, params: SelectiveSsmParams):
    """Input-dependent (B_t, C_t, delta_t) for one frame (or a stack of frames)."""
    x_t = np.asarray(x_t)
    if not np.isfinite(x_t).all():
        raise NonFiniteError("selective_params: non-finite input")
    b = x_t @ params.w_b
    c = x_t @ params.w_c
    delta = _softplus(x_t @ params.w_dt_down @ params.w_dt_up + params.dt_bias)
    return b, c, delta


def discretize(a_row: np.ndarray, b_t: np.ndarray, delta: np.ndarray | float):
    """(exp(delta * A), delta * B): exponential hold on A, Euler step on B.

    ``delta`` is a scalar for one channel or a (D,) vector for an (D, N) ``a_row``.
    """
    delta = np.asarray(delta)
    if np.any(delta <= 0):
        raise ValueError("discretize: step size delta must be positive")
    dl = delta[..., None] if delta.ndim and np.ndim(a_row) == delta.ndim + 1 else delta
    a_bar = np.exp(dl * a_row)
    b_bar = dl * b_t
    return a_bar, b_bar


def ssm_step(h_prev: np.ndarray, x_t: np.ndarray, params: SelectiveSsmParams, step: int = 0):
    """Advance the (D, N) hidden state by one frame; returns (h_t, y_t)."""
    b, c, delta = selective_params(x_t, params)
    a_bar = np.exp(delta[..., None] * params.A)
    h = a_bar * h_prev + (delta * x_t)[..., None] * b[..., None, :]
    if not np.isfinite(h).all():
        raise NonFiniteError(f"ssm_step: non-finite hidden state at step {step}")
    y = (h * c[..., None, :]).sum(axis=-1)
    if params.d_skip is not None:
        y = y + params.d_skip * x_t
    return h, y


# --- scan kernels on precomputed terms -------------------------------------
# Shapes: x, delta (..., T, D); A (D, N); B, C (..., T, N).

def combine(earlier: tuple[np.ndarray, np.ndarray], later: tuple[np.ndarray, np.ndarray]):
    """Compose two affine state updates h -> a*h + b, applying ``earlier`` first."""
    a1, b1 = earlier
    a2, b2 = later
    return a1 * a2, a2 * b1 + b2


def _terms(x, delta, A, B):
    decay = np.exp(delta[..., None] * A)
    drive = (delta * x)[..., None] * B[..., None, :]
    return decay, drive


def sequential_states(decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """All hidden states h_1..h_T for time axis -3 (…, T, D, N), h_0 = 0."""
    h = np.empty_like(drive)
    prev = np.zeros_like(drive[..., 0, :, :])
    for t in range(drive.shape[-3]):
        prev = decay[..., t, :, :] * prev + drive[..., t, :, :]
        h[..., t, :, :] = prev
    return h


def blelloch_states(decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    """Same result as :func:`sequential_states` via a work-efficient prefix scan.

    Up-sweep builds subtree totals, down-sweep distributes exclusive prefixes;
    the length is padded to a power of two with identity pairs (1, 0). The
    combination tree is fixed by T alone, so results are reproducible.
    """
    t_len = decay.shape[-3]
    size = 1 << max(t_len - 1, 0).bit_length()
    a = np.moveaxis(decay, -3, 0)
    b = np.moveaxis(drive, -3, 0)
    if size > t_len:
        pad = [(0, size - t_len)] + [(0, 0)] * (a.ndim - 1)
        a_s = np.pad(a, pad, constant_values=1.0)
        b_s = np.pad(b, pad)
    else:
        a_s, b_s = a.copy(), b.copy()

    stride = 1
    while stride < size:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        a_s[right], b_s[right] = combine((a_s[left], b_s[left]), (a_s[right], b_s[right]))
        stride *= 2

    a_s[size - 1] = 1.0
    b_s[size - 1] = 0.0
    stride = size // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        sub_a, sub_b = a_s[left], b_s[left]
        a_s[left], b_s[left] = a_s[right], b_s[right]
        a_s[right], b_s[right] = combine((a_s[left], b_s[left]), (sub_a, sub_b))
        stride //= 2

    # inclusive state = element applied after the exclusive prefix, from h_0 = 0
    h = a * b_s[:t_len] + b
    return np.moveaxis(h, 0, -3)


def _readout(h, C, x, d_skip):
    # same reduction as the streaming path so T=1 results agree bit for bit
    y = (h * C[..., None, :]).sum(axis=-1)
    if d_skip is not None:
        y = y + d_skip * x
    return y


def _streaming_scan(x, delta, A, B, C, d_skip):
    """Sequential scan without storing states; memory is O(D*N) in T."""
    y = np.empty_like(x)
    h = np.zeros(x.shape[:-2] + A.shape, dtype=x.dtype)
    for t in range(x.shape[-2]):
        d_t = delta[..., t, :]
        h = np.exp(d_t[..., None] * A) * h + (d_t * x[..., t, :])[..., None] * B[..., t, None, :]
        y[..., t, :] = (h * C[..., t, None, :]).sum(axis=-1)
    if d_skip is not None:
        y = y + d_skip * x
    return y


SCAN_METHODS = ("sequential", "parallel")


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   d_skip: Tensor | None = None, method: str = "sequential") -> Tensor:
    """Differentiable fused scan. ``delta`` must already be positive."""
    if method not in SCAN_METHODS:
        raise ValueError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")
    *lead, t_len, d = x.shape
    n = A.shape[-1]
    if delta.shape != x.shape or A.shape != (d, n) or B.shape != (*lead, t_len, n) or C.shape != B.shape:
        raise ShapeError(f"selective_scan: x {x.shape} delta {delta.shape} A {A.shape} B {B.shape} C {C.shape}")
    if d_skip is not None and d_skip.shape != (d,):
        raise ShapeError(f"selective_scan: d_skip {d_skip.shape} for {d} channels")

    inputs = (x, delta, A, B, C) + ((d_skip,) if d_skip is not None else ())
    tape = active_tape()
    recording = tape is not None and any(tape.is_tracked(t) for t in inputs)
    skip = None if d_skip is None else d_skip.data
    if not recording and method == "sequential":
        return _emit("selective_scan", inputs, _streaming_scan(x.data, delta.data, A.data, B.data, C.data, skip), None)

    decay, drive = _terms(x.data, delta.data, A.data, B.data)
    h = sequential_states(decay, drive) if method == "sequential" else blelloch_states(decay, drive)
    y = _readout(h, C.data, x.data, skip)

    def backward(gy):
        return _scan_backward(gy, x.data, delta.data, A.data, B.data, C.data, skip, decay, h)

    return _emit("selective_scan", inputs, y, backward)


def _scan_backward(gy, x, delta, A, B, C, d_skip, decay, h):
    t_len = x.shape[-2]
    # adjoint of the state, running backwards in time
    gh = np.empty_like(h)
    carry = np.zeros_like(h[..., 0, :, :])
    for t in range(t_len - 1, -1, -1):
        carry = gy[..., t, :, None] * C[..., t, None, :] + carry
        gh[..., t, :, :] = carry
        carry = carry * decay[..., t, :, :]
    h_prev = np.concatenate([np.zeros_like(h[..., :1, :, :]), h[..., :-1, :, :]], axis=-3)

    g_c = np.einsum("...td,...tdn->...tn", gy, h)
    g_decay = gh * h_prev * decay
    g_delta = np.einsum("...tdn,dn->...td", g_decay, A)
    lead_axes = tuple(range(x.ndim - 1))
    g_a = (g_decay * delta[..., None]).reshape(-1, *A.shape).sum(axis=0)
    u = delta * x
    g_u = np.einsum("...tdn,...tn->...td", gh, B)
    g_b = np.einsum("...tdn,...td->...tn", gh, u)
    g_delta = g_delta + g_u * x
    g_x = g_u * delta
    grads = [g_x, g_delta, g_a, g_b, g_c]
    if d_skip is not None:
        g_x += gy * d_skip
        grads.append((gy * x).sum(axis=lead_axes))
    return tuple(grads)


def _as_tensors(params: SelectiveSsmParams, dtype):
    t = lambda v: Tensor(np.asarray(v, dtype=dtype))  # noqa: E731
    return (t(params.A), t(params.w_b), t(params.w_c), t(params.w_dt_down), t(params.w_dt_up),
            t(params.dt_bias), None if params.d_skip is None else t(params.d_skip))


def _scan(x: np.ndarray, params: SelectiveSsmParams, method: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"scan needs (..., T, D) input with T >= 1, got {x.shape}")
    A, w_b, w_c, w_dn, w_up, bias, skip = _as_tensors(params, x.dtype)
    xt = Tensor(x)
    delta = ops.softplus(ops.add(ops.matmul(ops.matmul(xt, w_dn), w_up), bias))
    return selective_scan(xt, delta, A, ops.matmul(xt, w_b), ops.matmul(xt, w_c), skip, method).data


def scan_sequential(x: np.ndarray, params: SelectiveSsmParams) -> np.ndarray:
    """y for x of shape (..., T, D) by the step-by-step recurrence from h_0 = 0."""
    return _scan(x, params, "sequential")


def scan_parallel(x: np.ndarray, params: SelectiveSsmParams) -> np.ndarray:
    """y for x of shape (..., T, D) by the Blelloch prefix scan."""
    return _scan(x, params, "parallel")
