"""Exception hierarchy shared by every specdn module."""


class SpecdnError(Exception):
    """Base class for all library errors."""


class ZeroSpectrum(SpecdnError, ValueError):
    pass


class IoFailure(SpecdnError, OSError):
    pass


class FormatViolation(SpecdnError, ValueError):
    pass


class DegenerateConfig(SpecdnError, ValueError):
    pass


class ConfigError(SpecdnError, ValueError):
    pass


class ShapeMismatch(SpecdnError, ValueError):
    pass


class UnsupportedFilterSize(SpecdnError, ValueError):
    pass


class TooSmallForScales(SpecdnError, ValueError):
    pass


class NonSquareInput(SpecdnError, ValueError):
    pass


class DivergenceDetected(SpecdnError, RuntimeError):
    """Training produced a non-finite loss; ``report`` holds the partial history."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TooFewSamples(SpecdnError, ValueError):
    pass


class OutOfRange(SpecdnError, ValueError):
    pass


class NoConvergence(SpecdnError, RuntimeError):
    pass


class DegenerateData(SpecdnError, ValueError):
    pass
