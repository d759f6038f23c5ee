"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or mutually incompatible settings (CLI exit code 2)."""


class EmptyBatchError(ValueError):
    """A loss was asked to reduce a batch with no samples."""


class SingularityError(ArithmeticError):
    """A loss term is unbounded for the given input (e.g. Deep SAD at d = 0)."""


class UndefinedAUCError(ValueError):
    """ROC AUC requested on a score set containing a single class."""


class TrainingAborted(RuntimeError):
    """A run produced a non-finite loss and was stopped (CLI exit code 3)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = dict(report or {})
