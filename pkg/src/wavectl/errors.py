"""Exception types shared across the workbench."""


class WavectlError(Exception):
    """Base class for all workbench errors."""


class ConfigError(WavectlError):
    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{message} (key: {key})")
        self.key = key


# geometry / rasterization
class InvalidNesting(WavectlError):
    pass


class UnresolvedGeometry(WavectlError):
    pass


class PointInObstacle(WavectlError):
    pass


class DegenerateCollar(WavectlError):
    pass


class InvalidCoefficients(WavectlError):
    pass


# propagation
class CflViolation(WavectlError):
    pass


class BoxContamination(WavectlError):
    pass


class BoxContaminationWarning(UserWarning):
    pass


class TooLargeForOracle(WavectlError):
    pass


# decay measurement
class ZeroInitialData(WavectlError):
    pass


class InsufficientSamples(WavectlError):
    pass


class NonPositiveRatio(WavectlError):
    pass


# control synthesis
class SingularCollarSolve(WavectlError):
    pass


class NotAContraction(WavectlError):
    def __init__(self, message, rho=None):
        super().__init__(message)
        self.rho = rho


class MaxIterExceeded(WavectlError):
    pass


class TraceExtractionFailure(WavectlError):
    pass


class IncompatibleSignal(WavectlError):
    pass


class RobinSingular(WavectlError):
    pass


class RobinSingularWarning(UserWarning):
    pass


# rays
class UnsupportedVariableMetric(WavectlError):
    pass
