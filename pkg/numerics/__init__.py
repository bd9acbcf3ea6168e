"""Numeric substrate: tensors with reverse-mode gradients, kernels, AdamW."""
from numerics.gradcheck import GradCheckResult, check_gradients, relative_error
from numerics.ops import (
    concat,
    cross_entropy,
    elu,
    gelu,
    index_add,
    layer_norm,
    leaky_relu,
    log_softmax,
    relu,
    segment_softmax,
    segment_sum,
    softmax,
)
from numerics.optim import AdamW, LrSchedule, Parameter, adamw_step, lr_at_step
from numerics.tensor import Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "AdamW",
    "GradCheckResult",
    "LrSchedule",
    "Parameter",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "check_gradients",
    "concat",
    "cross_entropy",
    "elu",
    "gelu",
    "grad_enabled",
    "index_add",
    "layer_norm",
    "leaky_relu",
    "log_softmax",
    "lr_at_step",
    "no_grad",
    "relative_error",
    "relu",
    "segment_softmax",
    "segment_sum",
    "softmax",
]
