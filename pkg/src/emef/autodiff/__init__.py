"""Minimal numpy tensor library with reverse-mode automatic differentiation."""
from . import functional
from .functional import (
    bce_with_logits,
    box_mean,
    concat_channels,
    conv2d,
    conv2d_modulated,
    instance_norm,
    leaky_relu,
    linear,
    modulate_weight,
    nearest_upsample_2x,
    relu,
    sigmoid,
    tanh,
)
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    backward,
    check_finite,
    current_tape,
    get_default_dtype,
    no_grad,
    precision,
    reset_tape,
    set_default_dtype,
)

__all__ = [
    "Adam", "AdamState", "NonFiniteError", "Tape", "TapeError", "Tensor", "adam_step", "backward",
    "bce_with_logits", "box_mean", "check_finite", "concat_channels", "conv2d", "conv2d_modulated",
    "current_tape", "functional", "get_default_dtype", "gradcheck", "instance_norm", "leaky_relu",
    "linear", "modulate_weight", "nearest_upsample_2x", "no_grad", "numerical_grad", "precision",
    "relative_error", "relu", "reset_tape", "set_default_dtype", "sigmoid", "tanh",
]
