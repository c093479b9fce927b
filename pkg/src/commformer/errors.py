"""Exception types raised across the package."""


class CommFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(CommFormerError, ValueError):
    pass


class DegenerateRowError(CommFormerError, ValueError):
    """A softmax row had no unmasked entry."""


class EmbeddingIndexError(CommFormerError, IndexError):
    pass


class NumericError(CommFormerError, FloatingPointError):
    pass


class GradcheckError(CommFormerError, RuntimeError):
    """The function under check could not be evaluated to a finite scalar."""


class SparsityError(CommFormerError, ValueError):
    pass


class SequenceError(CommFormerError, ValueError):
    pass


class ArityError(CommFormerError, ValueError):
    pass


class ActionError(CommFormerError, ValueError):
    pass


class ConfigError(CommFormerError, ValueError):
    pass


class CheckpointError(CommFormerError, RuntimeError):
    pass
