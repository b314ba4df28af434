"""Exception types raised by sopabn."""


class SopabnError(Exception):
    """Base class for all package errors."""


class SingularSubmatrix(SopabnError, ValueError):
    """A covariance block could not be factorized even after jitter."""


class NonFiniteState(SopabnError, FloatingPointError):
    """A simulated state or output became NaN or infinite."""


class DimensionMismatch(SopabnError, ValueError):
    pass


class SizeLimit(SopabnError, ValueError):
    """Exact enumeration requested for too many inputs."""


class InsufficientSamples(SopabnError, ValueError):
    pass


class PairSetMismatch(SopabnError, ValueError):
    pass


class ConfigError(SopabnError, ValueError):
    pass


class NegativeValueFunction(SopabnError, ArithmeticError):
    """An analytic value function came out materially negative."""
