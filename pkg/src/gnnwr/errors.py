"""Exception hierarchy shared by every module in the package."""


class GnnwrError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class SchemaError(GnnwrError):
    pass


class DatasetError(GnnwrError):
    pass


class DomainError(GnnwrError, ValueError):
    pass


class NormalizationError(GnnwrError):
    pass


class ProjectionStateError(GnnwrError):
    pass


class SplitError(GnnwrError):
    pass


class ShapeError(GnnwrError, ValueError):
    pass


class CollinearityError(GnnwrError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateTestError(GnnwrError):
    pass


class BandwidthError(GnnwrError):
    pass


class LocalFitError(GnnwrError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SearchError(GnnwrError):
    pass


class AICcUndefinedError(GnnwrError):
    pass


class ConfigError(GnnwrError):
    pass


class BatchNormError(GnnwrError):
    pass


class StateError(GnnwrError):
    pass


class TrainingAbort(GnnwrError):
    """Raised when a non-finite gradient or loss stops training."""


class ReportError(GnnwrError):
    pass
