class KnnBallError(Exception):
    """Base class for every error raised by the lab."""


class InvalidCoordinateError(KnnBallError, ValueError):
    """A coordinate is NaN or infinite."""


class DimensionMismatchError(KnnBallError, ValueError):
    """Two objects that must share a dimension do not."""


class ParameterError(KnnBallError, ValueError):
    """A sampler or operation parameter is out of range."""


class DomainError(KnnBallError, ValueError):
    """An analytic formula is evaluated outside its domain."""


class DegenerateInteriorError(KnnBallError, ValueError):
    """The boundary shell leaves no interior in a blocking cube."""


class ConfigError(KnnBallError):
    """An experiment configuration or command line is invalid."""


class UnknownEstimatorError(ConfigError, KeyError):
    """run() was asked for an estimator that does not exist."""
