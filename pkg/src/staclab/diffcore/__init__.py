"""Parameter containers, reverse-mode differentiation and optimizers."""

from staclab.diffcore import tensor as ops
from staclab.diffcore.metagrad import (
    MetaGradResult,
    differentiate_through_update,
    grad,
    grad_through_update,
    value_and_grad,
)
from staclab.diffcore.optim import AdamState, RmsPropState, adam_step, rmsprop_step
from staclab.diffcore.params import GradSet, ParamSet, StructureError
from staclab.diffcore.tensor import NumericFailure, Tensor, backward, no_grad, sg, stop_gradient

__all__ = [
    "AdamState",
    "GradSet",
    "MetaGradResult",
    "NumericFailure",
    "ParamSet",
    "RmsPropState",
    "StructureError",
    "Tensor",
    "adam_step",
    "backward",
    "differentiate_through_update",
    "grad",
    "grad_through_update",
    "no_grad",
    "ops",
    "rmsprop_step",
    "sg",
    "stop_gradient",
    "value_and_grad",
]
