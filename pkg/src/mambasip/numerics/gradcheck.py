"""Central finite differences, used as the independent oracle for backprop."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for each coordinate i.

    ``coords`` restricts the probe to a subset of flat indices; other entries
    of the result are NaN.
    """
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective non-finite at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |n|, floor) over the probed (non-NaN) entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    probed = ~np.isnan(n)
    if not probed.any():
        return 0.0
    a, n = a[probed], n[probed]
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))


def check_param_gradients(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn`` against finite differences, per parameter.

    Must be called under 64-bit precision. With ``max_coords`` only that many
    randomly chosen coordinates of each parameter are probed.

    Each tensor's error is scaled by its own largest numeric gradient, floored
    at 1e-3 of the largest gradient over all tensors: a tensor whose true
    gradient is exactly zero (a key bias under softmax, say) is then compared
    against the overall gradient scale instead of against finite-difference
    round-off.
    """
    rng = np.random.default_rng(seed)
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    analytic = tape.gradient(loss, leaves)

    numerics = {}
    for name, value in params.items():
        base = np.asarray(value, dtype=np.float64)

        def f(x, name=name):
            probe = dict(leaves)
            probe[name] = Tensor(x)
            return loss_fn(probe).item()

        coords = None
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        numerics[name] = finite_difference_gradient(f, base, h, coords)
    scale = max((np.nanmax(np.abs(n)) for n in numerics.values() if not np.isnan(n).all()), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    return {k: relative_error(analytic[k], n, floor) for k, n in numerics.items()}
