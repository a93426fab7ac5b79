"""Spiking dual-encoder toolkit: LIF dynamics, distillation, fine-tuning and energy accounting."""
from .errors import (ConfigError, ContractError, DataError, DimensionError, DomainError, FormatError,
                     NumericError, SpikeAlignError)
from .kernels import BACKEND
from .tensor import Graph, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "ContractError", "DataError", "DimensionError", "DomainError",
    "FormatError", "Graph", "NumericError", "SpikeAlignError", "Tensor", "backward", "no_grad",
]
