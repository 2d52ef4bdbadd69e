from .attention import cross_attention, init_attention, self_attention
from .common import count, init_layer_norm, init_linear, layer_norm, linear, prefixed, scope
from .lstm import init_lstm, lstm_layer, lstm_transform
from .mamba import MambaStepper, bidirectional_mamba, init_mamba, mamba_block
from .mlp import init_mlp, mlp_block
from .temporal import (
    BINAURAL_VARIANTS,
    FUSIONS,
    LSTM_VARIANTS,
    MAMBA_VARIANTS,
    TRANSFORMER_VARIANTS,
    VARIANTS,
    BlockConfig,
    binaural_temporal_block,
    check_variant,
    init_binaural_temporal,
    init_temporal,
    temporal_block,
)
