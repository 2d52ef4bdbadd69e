"""LSTM baselines, built from the tape primitives one frame at a time."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..numerics import Tensor, ops
from .common import init_linear, linear, prefixed, scope


def init_lstm_cell(rng: np.random.Generator, d: int) -> dict[str, np.ndarray]:
    # gate order along the 4d axis: input, forget, cell, output
    bound = 1.0 / math.sqrt(d)
    b = rng.uniform(-bound, bound, 4 * d)
    b[d:2 * d] = 1.0
    return {
        "wx": rng.uniform(-bound, bound, (d, 4 * d)),
        "wh": rng.uniform(-bound, bound, (d, 4 * d)),
        "b": b,
    }


def init_lstm(rng: np.random.Generator, d: int, bidirectional: bool) -> dict[str, np.ndarray]:
    p = prefixed("fwd", init_lstm_cell(rng, d))
    if bidirectional:
        p.update(prefixed("bwd", init_lstm_cell(rng, d)))
        p.update(prefixed("proj", init_linear(rng, 2 * d, d)))
    return p


def lstm_layer(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Run one direction over x (..., T, d) from zero state; returns all hidden states."""
    d = p["wh"].shape[0]
    gates_x = ops.add(ops.matmul(x, p["wx"]), p["b"])
    h = c = None
    outputs = []
    for t in range(x.shape[-2]):
        g = ops.slice(gates_x, -2, t, t + 1)
        if h is not None:
            g = ops.add(g, ops.matmul(h, p["wh"]))
        i = ops.sigmoid(ops.slice(g, -1, 0, d))
        f = ops.sigmoid(ops.slice(g, -1, d, 2 * d))
        cand = ops.tanh(ops.slice(g, -1, 2 * d, 3 * d))
        o = ops.sigmoid(ops.slice(g, -1, 3 * d, 4 * d))
        c = ops.mul(i, cand) if c is None else ops.add(ops.mul(f, c), ops.mul(i, cand))
        h = ops.mul(o, ops.tanh(c))
        outputs.append(h)
    return ops.concat(outputs, axis=-2)


def lstm_transform(x: Tensor, p: Mapping[str, Tensor], bidirectional: bool,
                   rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    y = lstm_layer(x, scope(p, "fwd"))
    if bidirectional:
        back = ops.flip(lstm_layer(ops.flip(x, -2), scope(p, "bwd")), -2)
        y = linear(ops.concat([y, back], axis=-1), scope(p, "proj"))
    return ops.dropout(y, rate, rng)
