"""Checkpoint evaluation and the pooling-size sweep."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_io import (
    Checkpoint,
    Dataset,
    NormStats,
    load_dataset,
    load_manifest,
    read_checkpoint,
    select_split,
    write_checkpoint,
)
from .metrics import MetricReport, ncc_or_none, rmse
from .model import ModelConfig, count_params, init_params
from .training import TrainConfig, TrainResult, predict_dataset, train

CHECKPOINT_FORMAT = "mambasip-checkpoint"


class ConfigMismatch(ValueError):
    pass


def make_checkpoint(result: TrainResult, model_cfg: ModelConfig, train_cfg: TrainConfig | None,
                    stats: NormStats | None, with_optimizer: bool = False) -> Checkpoint:
    buffers = {} if stats is None else {"norm.mean": stats.mean, "norm.std": stats.std}
    opt = None
    if with_optimizer and result.optimizer is not None:
        opt = {"step": result.optimizer.step, "m": result.optimizer.m, "v": result.optimizer.v}
    config = {"format": CHECKPOINT_FORMAT, "model": model_cfg.to_dict(),
              "train": None if train_cfg is None else train_cfg.to_dict(),
              "best_step": result.best_step, "norm_source": None if stats is None else stats.source}
    return Checkpoint(config=config, params=result.params, buffers=buffers, optimizer=opt)


def load_model(path: str | Path, expect: ModelConfig | None = None):
    """Read a checkpoint; returns (ModelConfig, params, NormStats or None)."""
    ckpt = read_checkpoint(path)
    if ckpt.config.get("format") != CHECKPOINT_FORMAT:
        raise ConfigMismatch(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig.from_dict(ckpt.config["model"])
    if expect is not None and expect != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expect.to_dict().items() if getattr(cfg, k) != v}
        raise ConfigMismatch(f"checkpoint config differs from expected: {diff}")
    expected = {k: v.shape for k, v in init_params(cfg).items()}
    got = {k: v.shape for k, v in ckpt.params.items()}
    if expected != got:
        raise ConfigMismatch(f"{path}: parameter set does not match its own config")
    stats = None
    if "norm.mean" in ckpt.buffers:
        stats = NormStats(ckpt.buffers["norm.mean"].astype(np.float64),
                          ckpt.buffers["norm.std"].astype(np.float64), ckpt.config.get("norm_source") or "")
    return cfg, ckpt.params, stats


def evaluate_dataset(params, cfg: ModelConfig, data: Dataset, split: str) -> MetricReport:
    preds = predict_dataset(params, cfg, data)
    return MetricReport.from_predictions(split, preds, data.labels, data.ids)


def evaluate(checkpoint: str | Path, manifest: str | Path, split: str | None = "test",
             expect: ModelConfig | None = None, out: str | Path | None = None) -> MetricReport:
    """Eval-mode metrics of a checkpoint on one manifest split; optionally written as JSON."""
    cfg, params, stats = load_model(checkpoint, expect)
    entries = select_split(load_manifest(manifest), split)
    data = load_dataset(entries, Path(manifest).parent, stats, cfg.binaural, name=split or "all")
    report = evaluate_dataset(params, cfg, data, split or "all")
    if out is not None:
        report.save(out)
    return report


def write_predictions(path: str | Path, ids: Sequence[str], preds: np.ndarray, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "prediction", "label"])
        for i, p, t in zip(ids, preds, labels):
            w.writerow([i, f"{p:.6f}", f"{t:.4f}"])


@dataclass
class SweepRow:
    pool: int
    rmse: float
    ncc: float | None
    params: int
    pooled_frames: int
    best_step: int


def pooling_sweep(base: ModelConfig, train_set: Dataset, test_set: Dataset, train_cfg: TrainConfig,
                  pools: Sequence[int] = (20, 10, 5), val_set: Dataset | None = None,
                  log=None) -> list[SweepRow]:
    """Train and test one model per pooling size with identical seeds."""
    rows = []
    for p in pools:
        if p < 1:
            raise ValueError(f"pool sizes must be >= 1, got {p}")
        cfg = dataclasses.replace(base, pool=p)
        res = train(init_params(cfg), cfg, train_set, train_cfg, val_set)
        preds = predict_dataset(res.params, cfg, test_set)
        frames = math.ceil(train_set.feats_l[0].shape[1] / p)
        row = SweepRow(pool=p, rmse=rmse(preds, test_set.labels), ncc=ncc_or_none(preds, test_set.labels),
                       params=count_params(cfg), pooled_frames=frames, best_step=res.best_step)
        if log is not None:
            log(f"pool={p} frames={frames} params={row.params} rmse={row.rmse:.3f}")
        rows.append(row)
    return rows


def write_sweep(path: str | Path, variant: str, rows: Sequence[SweepRow]) -> None:
    """Two sections: the pool-by-variant RMSE table, then per-run details."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant"] + [f"p={r.pool}" for r in rows])
        w.writerow([variant] + [f"{r.rmse:.4f}" for r in rows])
        w.writerow([])
        w.writerow(["pool", "rmse", "ncc", "params", "pooled_frames", "best_step"])
        for r in rows:
            w.writerow([r.pool, f"{r.rmse:.4f}", "" if r.ncc is None else f"{r.ncc:.4f}",
                        r.params, r.pooled_frames, r.best_step])


__all__ = [
    "ConfigMismatch", "SweepRow", "evaluate", "evaluate_dataset", "load_model", "make_checkpoint",
    "pooling_sweep", "write_checkpoint", "write_predictions", "write_sweep",
]
