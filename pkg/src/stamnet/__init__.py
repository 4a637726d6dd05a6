"""Skeleton-based sign gesture recognition with a multi-branch
spatial-temporal attention network: tensor engine, data pipeline, model,
training/evaluation harness, and static cost profiler."""

from .errors import (AuditError, ContractError, DataError, FormatError,
                     GeometryError, ParameterError, ShapeError, StamnetError)
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor", "no_grad",
    "StamnetError", "ShapeError", "GeometryError", "ContractError",
    "DataError", "FormatError", "ParameterError", "AuditError",
]

__version__ = "0.1.0"
