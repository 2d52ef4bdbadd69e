"""Monaural and binaural intelligibility predictors over encoder-layer features.

Pipeline per ear: average-pool frames by ``pool`` -> shared linear D_in -> d
-> temporal block (weights shared by all encoder layers) -> mean over time,
giving one d-vector per layer. The audiogram embedding is appended as an
extra row, a transformer block runs across the L+1 rows, rows are averaged,
and a linear + sigmoid head gives a percentage. Binaural models couple the
ears inside the temporal block and average the two pooled vectors before the
head.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .blocks import (
    BlockConfig,
    binaural_temporal_block,
    check_variant,
    count,
    init_binaural_temporal,
    init_linear,
    init_temporal,
    linear,
    prefixed,
    scope,
    temporal_block,
)
from .numerics import ShapeError, Tensor, default_dtype, ops

AUDIOGRAM_SCALE = 0.01  # dB HL -> hundreds of dB before the projection
LAYER_VARIANT = "transformer"


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "uni-mamba"
    binaural: bool = False
    d: int = 384
    pool: int = 20
    layers: int = 32
    d_in: int = 1280
    n_freqs: int = 8
    mlp_hidden: int | None = None
    mamba_expand: int = 2
    d_state: int = 16
    conv_width: int = 4
    dt_rank: int | None = None
    d_skip: bool = True
    scan_method: str = "sequential"
    attn_dropout: float = 0.1
    mamba_dropout: float = 0.3
    lstm_dropout: float = 0.3
    layer_dropout: float = 0.1
    binaural_fusion: str = "split-direction"
    seed: int = 0

    def __post_init__(self):
        check_variant(self.variant, self.binaural)
        if self.pool < 1:
            raise ValueError(f"pool must be >= 1, got {self.pool}")
        if min(self.d, self.layers, self.d_in, self.n_freqs) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(
            d=self.d, mlp_hidden=self.mlp_hidden, mamba_expand=self.mamba_expand,
            d_state=self.d_state, conv_width=self.conv_width, dt_rank=self.dt_rank,
            d_skip=self.d_skip, scan_method=self.scan_method, attn_dropout=self.attn_dropout,
            mamba_dropout=self.mamba_dropout, lstm_dropout=self.lstm_dropout,
            binaural_fusion=self.binaural_fusion,
        )

    @property
    def layer_block(self) -> BlockConfig:
        return dataclasses.replace(self.block, attn_dropout=self.layer_dropout)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    blk = config.block
    init_tb = init_binaural_temporal if config.binaural else init_temporal
    return {
        **prefixed("feat_proj", init_linear(rng, config.d_in, config.d)),
        **prefixed("audio_proj", init_linear(rng, config.n_freqs, config.d)),
        **prefixed("temporal", init_tb(rng, config.variant, blk)),
        **prefixed("layer", init_temporal(rng, LAYER_VARIANT, config.layer_block)),
        **prefixed("head", init_linear(rng, config.d, 1)),
    }


def count_params(config: ModelConfig) -> int:
    return count(init_params(config))


def to_tensors(params: Mapping[str, np.ndarray], dtype=None, requires_grad: bool = False) -> dict[str, Tensor]:
    dtype = dtype or default_dtype()
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad, name=k) for k, v in params.items()}


# --- input preparation -------------------------------------------------------

def pool_time(x: np.ndarray, p: int) -> np.ndarray:
    """Average non-overlapping windows of ``p`` frames along axis -2.

    A final partial window is averaged over the frames it actually has.
    """
    x = np.asarray(x)
    if p < 1:
        raise ValueError(f"pool size must be >= 1, got {p}")
    t_len = x.shape[-2]
    if t_len == 0:
        raise ShapeError("pool_time: no frames to pool")
    if p == 1:
        return x.copy()
    n_out = math.ceil(t_len / p)
    out = np.empty(x.shape[:-2] + (n_out, x.shape[-1]), dtype=x.dtype)
    for i in range(n_out):
        out[..., i, :] = x[..., i * p:(i + 1) * p, :].mean(axis=-2)
    return out


def normalize_features(feats: np.ndarray, stats) -> np.ndarray:
    """(x - mean) / max(std, 1e-8), per layer and dim (or per dim for 1-d stats)."""
    feats = np.asarray(feats)
    mean, std = np.asarray(stats.mean), np.asarray(stats.std)
    if mean.shape != std.shape or mean.shape[-1] != feats.shape[-1]:
        raise ShapeError(f"normalize: stats shape {mean.shape} does not fit features {feats.shape}")
    if mean.ndim == 2:
        if mean.shape[0] != feats.shape[-3]:
            raise ShapeError(f"normalize: stats for {mean.shape[0]} layers, features have {feats.shape[-3]}")
        mean, std = mean[:, None, :], std[:, None, :]
    return ((feats - mean) / np.maximum(std, 1e-8)).astype(feats.dtype, copy=False)


def _check_feats(feats: np.ndarray, config: ModelConfig) -> np.ndarray:
    feats = np.asarray(feats)
    if feats.ndim == 3:
        feats = feats[None]
    if feats.ndim != 4 or feats.shape[1] != config.layers or feats.shape[3] != config.d_in:
        raise ShapeError(f"features {feats.shape} do not match (batch, L={config.layers}, T, D_in={config.d_in})")
    return feats


# --- forward pieces -------------------------------------------------------

def _project_layers(feats: np.ndarray, params, config: ModelConfig) -> Tensor:
    b, n_layers, _, d_in = feats.shape
    pooled = pool_time(feats, config.pool).astype(params["feat_proj.w"].dtype, copy=False)
    x = Tensor._wrap(pooled.reshape(b * n_layers, -1, d_in))
    return linear(x, scope(params, "feat_proj"))


def _time_pool(x: Tensor, batch: int, n_layers: int) -> Tensor:
    return ops.reshape(ops.mean(x, -2), (batch, n_layers, x.shape[-1]))


def encode_layers(feats: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    """(B, L, T, D_in) or (L, T, D_in) features -> (B, L, d) layer embeddings."""
    feats = _check_feats(feats, config)
    x = _project_layers(feats, params, config)
    y = temporal_block(x, scope(params, "temporal"), config.variant, config.block, rng)
    return _time_pool(y, feats.shape[0], feats.shape[1])


def embed_audiogram(audiogram: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """(B, F) or (F,) thresholds in dB HL -> (B, d)."""
    a = np.asarray(audiogram, dtype=params["audio_proj.w"].dtype)
    if a.ndim == 1:
        a = a[None]
    if a.shape[-1] != config.n_freqs:
        raise ShapeError(f"audiogram has {a.shape[-1]} frequencies, model expects {config.n_freqs}")
    return linear(Tensor._wrap(a * AUDIOGRAM_SCALE), scope(params, "audio_proj"))


def pool_layers(layer_embs: Tensor, audio_emb: Tensor, params: Mapping[str, Tensor], config: ModelConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Append the audiogram row, run the layer transformer, average rows -> (B, d)."""
    b, _, d = layer_embs.shape
    rows = ops.concat([layer_embs, ops.reshape(audio_emb, (b, 1, d))], axis=1)
    y = temporal_block(rows, scope(params, "layer"), LAYER_VARIANT, config.layer_block, rng)
    return ops.mean(y, 1)


def head(pooled: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """(B, d) -> (B,) percentage in (0, 100)."""
    logit = linear(pooled, scope(params, "head"))
    return ops.scale(ops.sigmoid(ops.reshape(logit, (pooled.shape[0],))), 100.0)


def layerwise_head(layer_embs: Tensor, audio_emb: Tensor, params: Mapping[str, Tensor], config: ModelConfig,
                   rng: np.random.Generator | None = None) -> Tensor:
    return head(pool_layers(layer_embs, audio_emb, params, config, rng), params)


def predict_mono(feats: np.ndarray, audiogram: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig,
                 rng: np.random.Generator | None = None) -> Tensor:
    if config.binaural:
        raise ValueError("predict_mono called with a binaural config")
    embs = encode_layers(feats, params, config, rng)
    return layerwise_head(embs, embed_audiogram(audiogram, params, config), params, config, rng)


def predict_binaural(feats_l: np.ndarray, feats_r: np.ndarray, audiogram_l: np.ndarray, audiogram_r: np.ndarray,
                     params: Mapping[str, Tensor], config: ModelConfig,
                     rng: np.random.Generator | None = None) -> Tensor:
    if not config.binaural:
        raise ValueError("predict_binaural called with a monaural config")
    fl, fr = _check_feats(feats_l, config), _check_feats(feats_r, config)
    if fl.shape != fr.shape:
        raise ShapeError(f"left/right features differ: {fl.shape} vs {fr.shape}")
    b, n_layers = fl.shape[:2]
    x_l = _project_layers(fl, params, config)
    x_r = _project_layers(fr, params, config)
    y_l, y_r = binaural_temporal_block(x_l, x_r, scope(params, "temporal"), config.variant, config.block, rng)
    both = ops.concat([_time_pool(y_l, b, n_layers), _time_pool(y_r, b, n_layers)], axis=0)
    audio = ops.concat([embed_audiogram(audiogram_l, params, config),
                        embed_audiogram(audiogram_r, params, config)], axis=0)
    pooled = pool_layers(both, audio, params, config, rng)
    avg = ops.scale(ops.add(ops.slice(pooled, 0, 0, b), ops.slice(pooled, 0, b, 2 * b)), 0.5)
    return head(avg, params)


def predict(batch, params: Mapping[str, Tensor], config: ModelConfig,
            rng: np.random.Generator | None = None) -> Tensor:
    """Dispatch on ``config.binaural`` for a :class:`~mambasip.data_io.Batch`-like object."""
    if config.binaural:
        if batch.feats_r is None or batch.audiogram_r is None:
            raise ValueError("binaural model needs right-ear features and audiogram")
        return predict_binaural(batch.feats_l, batch.feats_r, batch.audiogram_l, batch.audiogram_r,
                                params, config, rng)
    return predict_mono(batch.feats_l, batch.audiogram_l, params, config, rng)
