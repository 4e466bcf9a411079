"""Continuous-time fast-weight sequence models."""

from .fwp import RuleConfig
from .model import ModelConfig, SequenceModel, fwp_forward
from .numcore import ParamStore
from .solver import SolveConfig, ode_solve

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ParamStore",
    "RuleConfig",
    "SequenceModel",
    "SolveConfig",
    "fwp_forward",
    "ode_solve",
    "__version__",
]
