"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat
and the categories coarse: configuration problems, input parsing problems,
and everything else that can go wrong while running.
"""


class Hif8Error(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(Hif8Error):
    """An experiment or codec configuration violates its invariants."""


class ParseError(Hif8Error):
    """An input file (config, trace CSV) could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DomainError(Hif8Error):
    """An argument is outside the mathematical domain of an operation."""


class OutOfRangeError(DomainError):
    """A magnitude exceeds the largest representable tier bound."""


class NonFiniteError(DomainError):
    """A tensor element or scalar argument is NaN or infinite."""


class PrecisionError(Hif8Error):
    """A value that must lie exactly on the representable grid does not."""


class NoHistoryError(Hif8Error):
    """A delayed-scaling estimate was requested from an empty history."""


class ShapeError(Hif8Error):
    """Tensor shapes are incompatible for the requested operation."""


class SequencingError(Hif8Error):
    """An operation was invoked out of order (e.g. backward before forward)."""


class LayoutError(Hif8Error):
    """A quantization layout request is inconsistent with the architecture."""


class MetricError(Hif8Error):
    """A metric is undefined for the given inputs (e.g. zero baseline loss)."""
