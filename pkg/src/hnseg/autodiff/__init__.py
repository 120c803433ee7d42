"""Minimal reverse-mode autodiff engine for 3D CNN training."""

from .checkpoint import CheckpointData, config_hash, load_checkpoint, params_hash, save_checkpoint
from .functional import (
    batch_norm3d,
    conv3d,
    conv_transpose3d,
    log_softmax_channels,
    nearest_downsample,
    softmax_channels,
)
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    default_dtype,
    div,
    exp,
    flip,
    log,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sum_,
    verification_mode,
    zero_grad,
)

__all__ = [
    "AdamWState",
    "CheckpointData",
    "Tensor",
    "adamw_step",
    "add",
    "as_tensor",
    "backward",
    "batch_norm3d",
    "config_hash",
    "conv3d",
    "conv_transpose3d",
    "cosine_lr",
    "default_dtype",
    "div",
    "exp",
    "flip",
    "load_checkpoint",
    "log",
    "log_softmax_channels",
    "mean",
    "mul",
    "nearest_downsample",
    "neg",
    "no_grad",
    "params_hash",
    "relu",
    "reshape",
    "save_checkpoint",
    "set_default_dtype",
    "softmax_channels",
    "sum_",
    "verification_mode",
    "zero_grad",
]
