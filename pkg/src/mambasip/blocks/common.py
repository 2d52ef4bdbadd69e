"""Parameter-dict helpers shared by all blocks.

Parameters live in flat dicts keyed by dotted names ("attn.wq", "mlp.ln.g").
Init functions return numpy arrays; forward functions take the same keys
mapped to :class:`Tensor`.
"""

from __future__ import annotations

import math
from typing import Mapping, TypeVar

import numpy as np

from ..numerics import Tensor, ops

V = TypeVar("V")


def prefixed(prefix: str, params: Mapping[str, V]) -> dict[str, V]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def scope(params: Mapping[str, V], prefix: str) -> dict[str, V]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True) -> dict[str, np.ndarray]:
    bound = 1.0 / math.sqrt(fan_in)
    p = {"w": rng.uniform(-bound, bound, (fan_in, fan_out))}
    if bias:
        p["b"] = rng.uniform(-bound, bound, fan_out)
    return p


def init_layer_norm(d: int) -> dict[str, np.ndarray]:
    return {"g": np.ones(d), "b": np.zeros(d)}


def linear(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return ops.linear(x, p["w"], p.get("b"))


def layer_norm(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return ops.add(ops.mul(ops.layer_norm(x), p["g"]), p["b"])


def count(params: Mapping[str, np.ndarray | Tensor]) -> int:
    return int(sum(np.size(v.data if isinstance(v, Tensor) else v) for v in params.values()))
