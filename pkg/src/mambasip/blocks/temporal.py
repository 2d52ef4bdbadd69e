"""Temporal transform block variants, monaural and binaural."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..numerics import Tensor, ops
from .attention import cross_attention, init_attention, self_attention
from .common import init_layer_norm, init_linear, layer_norm, linear, prefixed, scope
from .lstm import init_lstm, lstm_transform
from .mamba import bidirectional_mamba, init_mamba, mamba_block
from .mlp import init_mlp, mlp_block

TRANSFORMER_VARIANTS = ("transformer", "transformer-no-skip", "transformer-no-mlp")
MAMBA_VARIANTS = (
    "uni-mamba", "uni-mamba+skip", "uni-mamba+mlp",
    "bi-mamba", "bi-mamba+skip", "bi-mamba+mlp",
)
LSTM_VARIANTS = ("uni-lstm", "bi-lstm")
VARIANTS = TRANSFORMER_VARIANTS + MAMBA_VARIANTS + LSTM_VARIANTS
BINAURAL_VARIANTS = ("transformer", "uni-mamba", "uni-mamba+mlp", "bi-mamba", "bi-mamba+mlp")
FUSIONS = ("split-direction", "shared-sum")


@dataclass(frozen=True)
class BlockConfig:
    d: int = 384
    mlp_hidden: int | None = None      # None -> 4 * d
    mamba_expand: int = 2
    d_state: int = 16
    conv_width: int = 4
    dt_rank: int | None = None         # None -> ceil(d / 16)
    d_skip: bool = True
    scan_method: str = "sequential"
    attn_dropout: float = 0.1
    mamba_dropout: float = 0.3
    lstm_dropout: float = 0.3
    binaural_fusion: str = "split-direction"

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 4 * self.d


def check_variant(variant: str, binaural: bool = False) -> None:
    allowed = BINAURAL_VARIANTS if binaural else VARIANTS
    if variant not in allowed:
        kind = "binaural" if binaural else "monaural"
        raise ValueError(f"unknown {kind} temporal variant {variant!r}; choose from {', '.join(allowed)}")


def _mamba_flags(variant: str) -> tuple[bool, bool, bool]:
    """(bidirectional, skip, mlp); the +mlp rows also keep the input skip."""
    bi = variant.startswith("bi-")
    mlp = variant.endswith("+mlp")
    return bi, mlp or variant.endswith("+skip"), mlp


def _init_mamba(rng, cfg: BlockConfig) -> dict[str, np.ndarray]:
    return init_mamba(rng, cfg.d, cfg.mamba_expand, cfg.d_state, cfg.conv_width, cfg.dt_rank, cfg.d_skip)


def init_temporal(rng: np.random.Generator, variant: str, cfg: BlockConfig) -> dict[str, np.ndarray]:
    check_variant(variant)
    d = cfg.d
    if variant in TRANSFORMER_VARIANTS:
        p = {**prefixed("attn", init_attention(rng, d)), **prefixed("ln1", init_layer_norm(d))}
        if variant != "transformer-no-mlp":
            p.update(prefixed("mlp", init_mlp(rng, d, cfg.hidden)))
        return p
    if variant in LSTM_VARIANTS:
        return prefixed("lstm", init_lstm(rng, d, variant == "bi-lstm"))
    bi, _, mlp = _mamba_flags(variant)
    p = prefixed("fwd", _init_mamba(rng, cfg))
    if bi:
        p.update(prefixed("bwd", _init_mamba(rng, cfg)))
    p.update(prefixed("ln", init_layer_norm(d)))
    if mlp:
        p.update(prefixed("mlp", init_mlp(rng, d, cfg.hidden)))
    return p


def _transformer(x, p, variant, cfg, rng):
    a = ops.dropout(self_attention(x, scope(p, "attn"), cfg.attn_dropout, rng), cfg.attn_dropout, rng)
    h = a if variant == "transformer-no-skip" else ops.add(x, a)
    h = layer_norm(h, scope(p, "ln1"))
    if variant == "transformer-no-mlp":
        return h
    return mlp_block(h, scope(p, "mlp"), cfg.attn_dropout, rng)


def _run_mamba(x, p, bi, cfg):
    if bi:
        return bidirectional_mamba(x, scope(p, "fwd"), scope(p, "bwd"), cfg.scan_method)
    return mamba_block(x, scope(p, "fwd"), cfg.scan_method)


def temporal_block(x: Tensor, p: Mapping[str, Tensor], variant: str, cfg: BlockConfig,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Apply one temporal variant to x (..., T, d). ``rng=None`` means eval mode."""
    check_variant(variant)
    if variant in TRANSFORMER_VARIANTS:
        return _transformer(x, p, variant, cfg, rng)
    if variant in LSTM_VARIANTS:
        return lstm_transform(x, scope(p, "lstm"), variant == "bi-lstm", cfg.lstm_dropout, rng)
    bi, skip, mlp = _mamba_flags(variant)
    m = ops.dropout(_run_mamba(x, p, bi, cfg), cfg.mamba_dropout, rng)
    h = layer_norm(ops.add(x, m) if skip else m, scope(p, "ln"))
    if mlp:
        h = mlp_block(h, scope(p, "mlp"), cfg.mamba_dropout, rng)
    return h


# --- binaural ---------------------------------------------------------------

def _init_pair_mix(rng, d):
    # own-channel and opposite-channel maps sharing one bias: a 2d -> d linear
    w = init_linear(rng, 2 * d, d)
    return {"self": w["w"][:d], "other": w["w"][d:], "b": w["b"]}


def init_binaural_temporal(rng: np.random.Generator, variant: str, cfg: BlockConfig) -> dict[str, np.ndarray]:
    check_variant(variant, binaural=True)
    d = cfg.d
    if variant == "transformer":
        return {
            **prefixed("attn", init_attention(rng, d)),
            **prefixed("ln1", init_layer_norm(d)),
            **prefixed("cross_l", init_attention(rng, d)),
            **prefixed("cross_r", init_attention(rng, d)),
            **prefixed("ln2", init_layer_norm(d)),
            **prefixed("mlp", init_mlp(rng, d, cfg.hidden)),
        }
    if cfg.binaural_fusion not in FUSIONS:
        raise ValueError(f"unknown binaural fusion {cfg.binaural_fusion!r}; choose from {FUSIONS}")
    bi, _, mlp = _mamba_flags(variant)
    p = prefixed("fwd", _init_mamba(rng, cfg))
    if bi:
        p.update(prefixed("bwd", _init_mamba(rng, cfg)))
    if cfg.binaural_fusion == "shared-sum":
        p.update(prefixed("mix.other", init_linear(rng, d, d)))
    elif bi:
        p.update(prefixed("mix_f", _init_pair_mix(rng, d)))
        p.update(prefixed("mix_b", _init_pair_mix(rng, d)))
        p.update(prefixed("merge", init_linear(rng, 2 * d, d)))
    else:
        p.update(prefixed("mix", _init_pair_mix(rng, d)))
    if mlp:
        p.update(prefixed("mlp", init_mlp(rng, d, cfg.hidden)))
    else:
        p.update(prefixed("ln", init_layer_norm(d)))
    return p


def _split(both: Tensor, n: int) -> tuple[Tensor, Tensor]:
    return ops.slice(both, 0, 0, n), ops.slice(both, 0, n, 2 * n)


def _pair_mix(own: Tensor, other: Tensor, p) -> Tensor:
    return ops.add(ops.add(ops.matmul(own, p["self"]), ops.matmul(other, p["other"])), p["b"])


def _binaural_transformer(x_l, x_r, p, cfg, rng):
    n = x_l.shape[0]
    rate = cfg.attn_dropout
    both = ops.concat([x_l, x_r], axis=0)
    a = ops.dropout(self_attention(both, scope(p, "attn"), rate, rng), rate, rng)
    a_l, a_r = _split(layer_norm(ops.add(both, a), scope(p, "ln1")), n)
    c_l = ops.dropout(cross_attention(a_l, a_r, scope(p, "cross_l"), rate, rng), rate, rng)
    c_r = ops.dropout(cross_attention(a_r, a_l, scope(p, "cross_r"), rate, rng), rate, rng)
    b = layer_norm(ops.add(ops.concat([a_l, a_r], axis=0), ops.concat([c_l, c_r], axis=0)), scope(p, "ln2"))
    return _split(mlp_block(b, scope(p, "mlp"), rate, rng), n)


def binaural_temporal_block(x_l: Tensor, x_r: Tensor, p: Mapping[str, Tensor], variant: str,
                            cfg: BlockConfig, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Couple left/right sequences (B, T, d) each; returns (y_l, y_r).

    Mamba variants: the Mamba weights are shared by both ears; a per-direction
    mix combines each ear's stream with the opposite ear's, then
    y_c = LN(x_c + dropout(GELU(mix_c))) or, for +mlp, MLP(x_c + mix_c).
    """
    check_variant(variant, binaural=True)
    if x_l.shape != x_r.shape:
        raise ValueError(f"binaural channels differ in shape: {x_l.shape} vs {x_r.shape}")
    if variant == "transformer":
        return _binaural_transformer(x_l, x_r, p, cfg, rng)

    n = x_l.shape[0]
    bi, _, mlp = _mamba_flags(variant)
    both = ops.concat([x_l, x_r], axis=0)
    if cfg.binaural_fusion == "shared-sum":
        m_l, m_r = _split(_run_mamba(both, p, bi, cfg), n)
        other = scope(p, "mix.other")
        mix_l = ops.add(m_l, linear(m_r, other))
        mix_r = ops.add(m_r, linear(m_l, other))
    elif bi:
        f_l, f_r = _split(mamba_block(both, scope(p, "fwd"), cfg.scan_method), n)
        back = ops.flip(mamba_block(ops.flip(both, -2), scope(p, "bwd"), cfg.scan_method), -2)
        b_l, b_r = _split(back, n)
        mf, mb, merge = scope(p, "mix_f"), scope(p, "mix_b"), scope(p, "merge")
        mix_l = linear(ops.concat([_pair_mix(f_l, f_r, mf), _pair_mix(b_l, b_r, mb)], axis=-1), merge)
        mix_r = linear(ops.concat([_pair_mix(f_r, f_l, mf), _pair_mix(b_r, b_l, mb)], axis=-1), merge)
    else:
        m_l, m_r = _split(mamba_block(both, scope(p, "fwd"), cfg.scan_method), n)
        mix = scope(p, "mix")
        mix_l, mix_r = _pair_mix(m_l, m_r, mix), _pair_mix(m_r, m_l, mix)

    mixed = ops.concat([mix_l, mix_r], axis=0)
    if mlp:
        out = mlp_block(ops.add(both, mixed), scope(p, "mlp"), cfg.mamba_dropout, rng)
    else:
        out = layer_norm(ops.add(both, ops.dropout(ops.gelu(mixed), cfg.mamba_dropout, rng)), scope(p, "ln"))
    return _split(out, n)
