"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """An operation produced or received non-finite values."""


class FormatError(ValueError):
    """An on-disk file does not conform to its declared format."""


class DataError(ValueError):
    """Dataset contents are inconsistent (e.g. image/mask pair mismatch)."""


class CheckpointError(ValueError):
    """A checkpoint cannot be loaded (corrupt file or shape manifest mismatch)."""
