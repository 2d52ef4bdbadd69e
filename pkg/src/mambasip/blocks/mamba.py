"""Mamba block: gated causal conv + selective scan between two projections."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .. import ssm
from ..numerics import Tensor, ops
from .common import init_linear, prefixed, scope


def init_mamba(rng: np.random.Generator, d: int, expand: int = 2, d_state: int = 16,
               conv_width: int = 4, dt_rank: int | None = None, d_skip: bool = True) -> dict[str, np.ndarray]:
    d_inner = expand * d
    dt_rank = dt_rank or ssm.dt_rank_for(d)
    cb = 1.0 / math.sqrt(conv_width)
    return {
        **prefixed("in_proj", init_linear(rng, d, 2 * d_inner, bias=False)),
        "conv.w": rng.uniform(-cb, cb, (d_inner, conv_width)),
        "conv.b": rng.uniform(-cb, cb, d_inner),
        **prefixed("ssm", ssm.init_ssm(rng, d_inner, d_state, dt_rank, d_skip=d_skip)),
        **prefixed("out_proj", init_linear(rng, d_inner, d, bias=False)),
    }


def mamba_block(x: Tensor, p: Mapping[str, Tensor], method: str = "sequential") -> Tensor:
    """x (..., T, d) -> (..., T, d); causal in T."""
    d_inner = p["conv.w"].shape[0]
    xz = ops.matmul(x, p["in_proj.w"])
    a = ops.silu(ops.causal_conv1d(ops.slice(xz, -1, 0, d_inner), p["conv.w"], p["conv.b"]))
    z = ops.slice(xz, -1, d_inner, 2 * d_inner)
    s = scope(p, "ssm")
    delta = ops.softplus(ops.add(ops.matmul(ops.matmul(a, s["w_dt_down"]), s["w_dt_up"]), s["dt_bias"]))
    A = ops.scale(ops.exp(s["a_log"]), -1.0)
    y = ssm.selective_scan(a, delta, A, ops.matmul(a, s["w_b"]), ops.matmul(a, s["w_c"]),
                           s.get("d_skip"), method)
    return ops.matmul(ops.mul(y, ops.silu(z)), p["out_proj.w"])


def bidirectional_mamba(x: Tensor, fwd: Mapping[str, Tensor], bwd: Mapping[str, Tensor],
                        method: str = "sequential") -> Tensor:
    """Mamba(x) + flip(Mamba'(flip(x))) along time."""
    back = ops.flip(mamba_block(ops.flip(x, -2), bwd, method), -2)
    return ops.add(mamba_block(x, fwd, method), back)


class MambaStepper:
    """Frame-by-frame inference with a fixed-size state.

    The state is the last K-1 conv inputs plus the (d_inner, N) SSM state, so
    memory does not grow with the number of frames processed.
    """

    def __init__(self, params: Mapping[str, Tensor | np.ndarray]):
        arr = lambda k: np.asarray(params[k].data if isinstance(params[k], Tensor) else params[k])  # noqa: E731
        self.w_in = arr("in_proj.w")
        self.conv_w = arr("conv.w")
        self.conv_b = arr("conv.b")
        self.w_out = arr("out_proj.w")
        self.ssm = ssm.SelectiveSsmParams.from_params(scope(params, "ssm"))
        self.d_inner, width = self.conv_w.shape
        dtype = self.w_in.dtype
        self.conv_state = np.zeros((width - 1, self.d_inner), dtype=dtype)
        self.ssm_state = np.zeros((self.d_inner, self.ssm.d_state), dtype=dtype)
        self.steps = 0

    @property
    def state_nbytes(self) -> int:
        return self.conv_state.nbytes + self.ssm_state.nbytes

    def step(self, x_t: np.ndarray) -> np.ndarray:
        xz = x_t @ self.w_in
        a_in, z = xz[: self.d_inner], xz[self.d_inner:]
        window = np.concatenate([self.conv_state, a_in[None, :]], axis=0)
        conv = self.conv_b + (window * self.conv_w.T).sum(axis=0)
        self.conv_state = window[1:]
        a = conv / (1.0 + np.exp(-conv))
        self.ssm_state, y = ssm.ssm_step(self.ssm_state, a, self.ssm, self.steps)
        self.steps += 1
        return (y * (z / (1.0 + np.exp(-z)))) @ self.w_out
