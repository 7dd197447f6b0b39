"""Small fully connected network: autodiff tape, MLP ops, Adam, and the
convex logistic head solver."""

from .autodiff import CompGraph, Tensor, grad, relu, softmax, softmax_cross_entropy
from .logistic import fit_logistic_head
from .mlp import (
    AdaptedParams,
    MlpConfig,
    ParameterSet,
    accuracy,
    feature_parameter_count,
    features,
    forward,
    init_mlp,
    inner_adapted_params,
    load_checkpoint,
    loss_and_grad,
    parameter_count,
    replace_head,
    save_checkpoint,
)
from .optim import AdamState, adam_step, init_adam

__all__ = [
    "CompGraph",
    "Tensor",
    "grad",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "MlpConfig",
    "ParameterSet",
    "AdaptedParams",
    "init_mlp",
    "forward",
    "features",
    "accuracy",
    "loss_and_grad",
    "inner_adapted_params",
    "parameter_count",
    "feature_parameter_count",
    "replace_head",
    "save_checkpoint",
    "load_checkpoint",
    "AdamState",
    "init_adam",
    "adam_step",
    "fit_logistic_head",
]
