"""Minimal reverse-mode autodiff and the layers the detectors are built from."""
from .checkpoint import load_weights, save_checkpoint
from .gradcheck import grad_check
from .layers import (
    Activation,
    BatchNorm1D,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    LayerCost,
    LayerNorm,
    MaxPool1D,
    Module,
    MultiHeadAttention,
    Parameter,
    PositionalEncoding,
    Residual,
    Sequential,
    multi_head_attention,
    positional_encoding,
    precise_batch_norm,
)
from .ops import (
    batch_norm,
    bce_loss,
    contrastive_loss,
    conv1d_same,
    dropout,
    euclidean_distance,
    layer_norm,
    max_pool1d,
)
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, Tensor, no_grad, set_check_finite

__all__ = [name for name in dir() if not name.startswith("_")]
