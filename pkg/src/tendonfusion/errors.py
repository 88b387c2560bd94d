"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for bad input data, 4 for numerical failures.
"""


class TendonFusionError(Exception):
    exit_code = 1


class ConfigError(TendonFusionError):
    exit_code = 2


class DataError(TendonFusionError):
    exit_code = 3


class ManifestError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class PgmError(DataError):
    pass


class EmptyRoiError(DataError):
    pass


class NoPairsError(DataError):
    """No pixel pair at the requested offset has both ends inside the ROI."""


class StampMismatchError(DataError):
    pass


class LeakageError(DataError, AssertionError):
    """A patient contributes to both the training and evaluation side of a fold."""


class NumericalError(TendonFusionError):
    exit_code = 4


class LassoConvergenceError(NumericalError):
    def __init__(self, message, model=None, gap=None):
        super().__init__(message)
        self.model = model
        self.gap = gap


class RankDeficientError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EmptySupportError(NumericalError):
    pass
