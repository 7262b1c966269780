"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SgpmilError`,
so the CLI can report a single machine-parseable class name.
"""


class SgpmilError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SgpmilError, ValueError):
    pass


class NotPositiveDefiniteError(SgpmilError, ArithmeticError):
    def __init__(self, message, jitter_ladder=()):
        super().__init__(message)
        self.jitter_ladder = tuple(jitter_ladder)


class SingularMatrixError(SgpmilError, ArithmeticError):
    pass


class DatasetFormatError(SgpmilError, ValueError):
    pass


class StratificationError(SgpmilError, ValueError):
    pass


class ConfigError(SgpmilError, ValueError):
    pass


class DegenerateInputError(SgpmilError, ValueError):
    """Inputs a metric cannot be computed on (empty, single class, ...)."""


class GradientError(SgpmilError, ArithmeticError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class TrainingAborted(SgpmilError, RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
