"""Reverse-mode differentiation, small MLPs, and Adam."""
from .nn import ConfigError, MlpSpec, ParamSet, init_uniform, mlp_forward, mlp_forward_jac
from .optim import AdamState, adam_step, lr_schedule
from .tape import NumericError, Tensor, constant, gradient, variable

__all__ = [
    "AdamState",
    "ConfigError",
    "MlpSpec",
    "NumericError",
    "ParamSet",
    "Tensor",
    "adam_step",
    "constant",
    "gradient",
    "init_uniform",
    "lr_schedule",
    "mlp_forward",
    "mlp_forward_jac",
    "variable",
]
