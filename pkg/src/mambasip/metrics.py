"""Prediction metrics: RMSE and centred normalised cross-correlation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _pair(preds, targets, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {p.size}")
    return p, t


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def ncc(preds, targets) -> float:
    """Centred (Pearson) correlation; undefined, and rejected, for a constant vector."""
    p, t = _pair(preds, targets, min_len=2)
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = float(np.dot(pc, pc)), float(np.dot(tc, tc))
    if sp == 0.0 or st == 0.0:
        raise ValueError("ncc is undefined when predictions or targets are constant")
    r = float(np.dot(pc, tc) / np.sqrt(sp * st))
    return max(-1.0, min(1.0, r))


def ncc_or_none(preds, targets) -> float | None:
    try:
        return ncc(preds, targets)
    except ValueError:
        return None


@dataclass
class MetricReport:
    split: str
    n: int
    rmse: float
    ncc: float | None
    residuals: list[float] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    ncc_definition: str = "centred"
    note: str = ""

    @classmethod
    def from_predictions(cls, split: str, preds, targets, ids=()) -> "MetricReport":
        p, t = _pair(preds, targets)
        r = ncc_or_none(p, t)
        note = "" if r is not None else "ncc undefined: predictions or targets constant"
        return cls(split=split, n=int(p.size), rmse=rmse(p, t), ncc=r,
                   residuals=[float(v) for v in p - t], ids=list(ids), note=note)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))
