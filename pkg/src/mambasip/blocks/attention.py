"""Single-head scaled dot-product attention without positional encoding."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..numerics import ShapeError, Tensor, ops
from .common import init_linear, prefixed


def init_attention(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    p = {}
    for name in ("q", "k", "v", "o"):
        p.update(prefixed(name, init_linear(rng, d, d)))
    return p


def cross_attention(x_q: Tensor, x_kv: Tensor, p: Mapping[str, Tensor],
                    rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V, then the output map.

    Queries come from ``x_q`` and keys/values from ``x_kv``; no mask. Dropout
    at ``rate`` hits the attention weights in train mode (``rng`` given).
    """
    if x_q.shape[-2] != x_kv.shape[-2]:
        raise ShapeError(f"cross_attention: query length {x_q.shape[-2]} != key length {x_kv.shape[-2]}")
    d = p["q.w"].shape[1]
    q = ops.linear(x_q, p["q.w"], p["q.b"])
    k = ops.linear(x_kv, p["k.w"], p["k.b"])
    v = ops.linear(x_kv, p["v.w"], p["v.b"])
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k)), 1.0 / math.sqrt(d))
    weights = ops.dropout(ops.softmax(scores), rate, rng)
    return ops.linear(ops.matmul(weights, v), p["o.w"], p["o.b"])


def self_attention(x: Tensor, p: Mapping[str, Tensor],
                   rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    return cross_attention(x, x, p, rate, rng)
