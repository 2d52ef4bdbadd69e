"""Huber regression with Adam under a linear-warmup cosine schedule."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data_io import Dataset
from .metrics import ncc_or_none, rmse
from .model import ModelConfig, predict, to_tensors
from .numerics import NonFiniteError, Tape, Tensor, ops

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    # desk-scale defaults; the published recipe is total_steps=80_000,
    # warmup_steps=2_000, batch_size=160, lr=3e-5
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.90
    beta2: float = 0.98
    eps: float = 1e-8
    huber_delta: float = 1.0
    grad_clip: float | None = None
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.total_steps, self.batch_size, self.eval_every) <= 0 or self.lr <= 0:
            raise ValueError("total_steps, batch_size, eval_every and lr must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be in [0, total_steps)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


PUBLISHED_RECIPE = TrainConfig(total_steps=80_000, warmup_steps=2_000, batch_size=160, lr=3e-5, eval_every=1_000)


def huber_loss(pred, target, delta: float = 1.0) -> Tensor:
    """Mean Huber loss in percentage points."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    pred = pred if isinstance(pred, Tensor) else Tensor(np.atleast_1d(pred))
    target = Tensor(np.broadcast_to(np.asarray(target, dtype=pred.dtype), pred.shape))
    if not (np.isfinite(pred.data).all() and np.isfinite(target.data).all()):
        raise NonFiniteError("huber_loss: non-finite prediction or target")
    per = ops.huber(pred, target, delta)
    return ops.mean(ops.reshape(per, (-1,)), 0)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.90
    beta2: float = 0.98
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], cfg: TrainConfig | None = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()},
                   0, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh parameter arrays, advances ``state`` in place."""
    if params.keys() != grads.keys():
        raise ValueError("gradients do not cover the same parameters")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    new = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        new[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return new, state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    best_step: int = 0
    optimizer: AdamState | None = None


def predict_dataset(params: Mapping[str, np.ndarray], config: ModelConfig, data: Dataset,
                    batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions in dataset order."""
    tensors = to_tensors(params)
    out = np.empty(len(data))
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        # batches() groups by feature shape; scatter back to dataset order
        preds = np.concatenate([predict(b, tensors, config).data for b in data.batches(idx)])
        out[_group_order(data, idx)] = preds
    return out


def _group_order(data: Dataset, idx: list[int]) -> list[int]:
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        groups.setdefault(data.feats_l[i].shape, []).append(i)
    return [i for g in groups.values() for i in g]


def _batch_loss(params: Mapping[str, Tensor], config: ModelConfig, data: Dataset, idx: list[int],
                delta: float, rng: np.random.Generator | None) -> Tensor:
    total = None
    for b in data.batches(idx):
        pred = predict(b, params, config, rng)
        part = ops.sum(ops.huber(pred, Tensor(b.labels.astype(pred.dtype)), delta))
        total = part if total is None else ops.add(total, part)
    return ops.scale(total, 1.0 / len(idx))


def train(params: Mapping[str, np.ndarray], config: ModelConfig, train_set: Dataset, cfg: TrainConfig,
          val_set: Dataset | None = None) -> TrainResult:
    """Minimise Huber loss; returns the parameters with the best validation RMSE.

    Shuffling, dropout masks and everything else random derive from
    ``cfg.seed``, so reruns are bit-identical. Without a validation set the
    final parameters are returned.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    params = {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
    state = AdamState.zeros_like(params, cfg)
    shuffle = np.random.default_rng(cfg.seed)
    order: list[int] = []
    result = TrainResult(params=params, optimizer=state)
    best_rmse = math.inf

    for step in range(1, cfg.total_steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(shuffle.permutation(len(train_set)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
        leaves = to_tensors(params, np.float32, requires_grad=True)
        dropout_rng = np.random.default_rng([cfg.seed, step])
        try:
            # overflow surfaces as NonFiniteError; numpy's own warning would only duplicate it
            with np.errstate(over="ignore", invalid="ignore"), Tape() as tape:
                loss = _batch_loss(leaves, config, train_set, idx, cfg.huber_delta, dropout_rng)
            with np.errstate(over="ignore", invalid="ignore"):
                grads = tape.gradient(loss, leaves)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if cfg.grad_clip is not None:
            grads = clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_at(step, cfg)
        params, state = adam_step(params, grads, state, lr)
        if not all(np.isfinite(p).all() for p in params.values()):
            raise TrainingDiverged(step, "non-finite parameters after update")
        result.history.append({"step": step, "loss": loss.item(), "lr": lr})

        if val_set is not None and len(val_set) and (step % cfg.eval_every == 0 or step == cfg.total_steps):
            preds = predict_dataset(params, config, val_set)
            score = rmse(preds, val_set.labels)
            result.validation.append({"step": step, "rmse": score, "ncc": ncc_or_none(preds, val_set.labels)})
            log.info("step %d loss %.4f val rmse %.3f", step, loss.item(), score)
            if score < best_rmse:
                best_rmse = score
                result.params, result.best_step = params, step

    if val_set is None or not len(val_set):
        result.params, result.best_step = params, cfg.total_steps
    result.optimizer = state
    return result
