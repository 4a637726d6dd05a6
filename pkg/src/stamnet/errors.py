"""Exception types shared across the package."""


class StamnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StamnetError):
    """Tensor shapes are incompatible for the requested operation."""


class GeometryError(ShapeError):
    """Convolution/pooling geometry is invalid (e.g. kernel longer than padded input)."""


class ContractError(StamnetError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class DataError(StamnetError):
    """Input data violates a validity requirement (non-finite values, bad labels, ...)."""


class FormatError(DataError):
    """A file does not conform to its documented schema."""


class ParameterError(StamnetError):
    """A configuration or hyperparameter value is out of its allowed range."""


class AuditError(StamnetError):
    """Static cost accounting disagrees with the instantiated model."""
