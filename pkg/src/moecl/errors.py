"""Exception types shared across the package."""


class MoeclError(Exception):
    """Base class for all package errors."""


class ShapeError(MoeclError, ValueError):
    """Operand shapes violate an operation's contract."""


class EmptySupportError(MoeclError, ValueError):
    """A softmax/gating call was left with no unmasked entries."""


class NonFiniteError(MoeclError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(MoeclError, ValueError):
    """Invalid backward call (e.g. non-scalar root)."""


class TaskError(MoeclError, ValueError):
    """Unknown or duplicate task id."""


class DataError(MoeclError, ValueError):
    """Malformed dataset, checkpoint, or matrix input."""
