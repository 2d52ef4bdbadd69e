from __future__ import annotations

from typing import Mapping

import numpy as np

from ..numerics import Tensor, ops
from .common import init_layer_norm, init_linear, layer_norm, linear, prefixed, scope


def init_mlp(rng: np.random.Generator, d: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        **prefixed("up", init_linear(rng, d, hidden)),
        **prefixed("down", init_linear(rng, hidden, d)),
        **prefixed("ln", init_layer_norm(d)),
    }


def mlp_block(x: Tensor, p: Mapping[str, Tensor], rate: float = 0.0,
              rng: np.random.Generator | None = None) -> Tensor:
    """LN(x + dropout(down(GELU(up(x)))))."""
    h = linear(ops.gelu(linear(x, scope(p, "up"))), scope(p, "down"))
    return layer_norm(ops.add(x, ops.dropout(h, rate, rng)), scope(p, "ln"))
