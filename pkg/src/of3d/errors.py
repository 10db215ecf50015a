"""Exception types shared across the package."""


class Of3dError(Exception):
    """Base class for all package errors."""


class ShapeError(Of3dError):
    """Raised when tensor or array shapes are incompatible."""


class ContractError(Of3dError):
    """Raised when an operation is called outside its contract."""


class SceneFormatError(Of3dError):
    """Raised on malformed scene/prediction/checkpoint files.

    Carries the 1-based line number where parsing failed when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PlacementError(Of3dError):
    """Raised when the synthetic generator cannot place all boxes."""


class InfeasibleMatchError(Of3dError):
    """Raised when an assignment problem has no feasible solution."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"no finite cost in ground-truth column {column}")


class ConfigError(Of3dError):
    """Raised on unknown or malformed configuration keys/values."""
