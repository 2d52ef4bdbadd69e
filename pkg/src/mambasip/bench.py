"""Wall-time scaling of attention versus the Mamba scan over sequence length."""

from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .blocks import MambaStepper, init_attention, init_mamba, mamba_block, self_attention
from .model import to_tensors
from .numerics import Tensor

KINDS = ("attention", "mamba", "mamba-parallel")
MIN_RESOLVABLE = 1000  # a point is trusted only if it spans this many timer ticks
MIN_SAMPLE_SECONDS = 0.1  # short calls are looped until one sample lasts this long


@dataclass
class BenchReport:
    kind: str
    lengths: list[int]
    seconds: list[float]
    spread: list[float]              # (max - min) / median over repetitions
    peak_bytes: list[int]
    flagged: list[int] = field(default_factory=list)  # lengths excluded from the fit
    exponent: float = float("nan")


def _forward(kind: str, d: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "attention":
        p = to_tensors(init_attention(rng, d), np.float32)
        return lambda x: self_attention(x, p)
    if kind in ("mamba", "mamba-parallel"):
        p = to_tensors(init_mamba(rng, d), np.float32)
        method = "parallel" if kind == "mamba-parallel" else "sequential"
        return lambda x: mamba_block(x, p, method)
    raise ValueError(f"unknown bench kind {kind!r}; choose from {KINDS}")


def fit_exponent(lengths: Sequence[int], seconds: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length)."""
    slope, _ = np.polyfit(np.log(lengths), np.log(seconds), 1)
    return float(slope)


def _single_thread():
    return threadpool_limits(limits=1)


def _time_call(fn, number: int) -> float:
    t0 = time.perf_counter()
    for _ in range(number):
        fn()
    return (time.perf_counter() - t0) / number


def bench_scaling(kind: str, lengths: Sequence[int], d: int = 384, repetitions: int = 5,
                  seed: int = 0, measure_memory: bool = True) -> BenchReport:
    """Median eval-mode forward time per length, single-threaded.

    Each repetition loops the forward call enough times to last at least
    ``MIN_SAMPLE_SECONDS`` and reports the per-call mean, which keeps
    scheduler jitter from dominating the shortest lengths.
    """
    lengths = list(lengths)
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    if len(lengths) < 2 or lengths[-1] < 8 * lengths[0]:
        raise ValueError("lengths must span at least three doublings")
    fwd = _forward(kind, d, seed)
    rng = np.random.default_rng(seed + 1)
    tick = time.get_clock_info("perf_counter").resolution
    seconds, spread, peaks, flagged = [], [], [], []
    with _single_thread():
        for t_len in lengths:
            x = Tensor(rng.standard_normal((t_len, d)).astype(np.float32))
            call = lambda: fwd(x)  # noqa: E731
            first = _time_call(call, 1)  # also the warm-up
            number = max(1, int(MIN_SAMPLE_SECONDS / max(first, 1e-9)))
            runs = [_time_call(call, number) for _ in range(repetitions)]
            med = statistics.median(runs)
            seconds.append(med)
            spread.append((max(runs) - min(runs)) / med if med > 0 else float("inf"))
            if med < MIN_RESOLVABLE * tick:
                flagged.append(t_len)
            peak = 0
            if measure_memory:
                tracemalloc.start()
                fwd(x)
                peak = tracemalloc.get_traced_memory()[1]
                tracemalloc.stop()
            peaks.append(peak)
    keep = [i for i, n in enumerate(lengths) if n not in flagged]
    exponent = fit_exponent([lengths[i] for i in keep], [seconds[i] for i in keep]) if len(keep) >= 2 else float("nan")
    return BenchReport(kind, lengths, seconds, spread, peaks, flagged, exponent)


def stepwise_memory(lengths: Sequence[int], d: int = 384, seed: int = 0) -> list[dict]:
    """State size and traced peak memory of frame-by-frame Mamba inference per length."""
    rng = np.random.default_rng(seed)
    params = init_mamba(rng, d)
    params = {k: v.astype(np.float32) for k, v in params.items()}
    out = []
    for t_len in lengths:
        stepper = MambaStepper(params)
        frames = np.random.default_rng(seed + 1).standard_normal((t_len, d)).astype(np.float32)
        tracemalloc.start()
        for t in range(t_len):
            stepper.step(frames[t])
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        out.append({"length": t_len, "state_bytes": stepper.state_nbytes, "peak_bytes": peak})
    return out


def write_bench(path: str | Path, reports: Sequence[BenchReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "length", "seconds", "spread", "peak_bytes", "flagged", "exponent"])
        for r in reports:
            for i, n in enumerate(r.lengths):
                w.writerow([r.kind, n, f"{r.seconds[i]:.6g}", f"{r.spread[i]:.3f}", r.peak_bytes[i],
                            int(n in r.flagged), f"{r.exponent:.4f}"])
