"""Exception hierarchy shared by every rflab module."""


class RFLabError(Exception):
    """Base class for all rflab errors."""


class DimensionError(RFLabError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(RFLabError, ValueError):
    """A configuration value is invalid or unsupported."""


class DomainError(RFLabError, ValueError):
    """A scalar argument lies outside the domain of the function."""


class UsageError(RFLabError, ValueError):
    """An API was called in a way its contract forbids."""


class CapacityError(RFLabError, ValueError):
    """A sequence exceeds the estimator's positional capacity."""


class AlignmentError(DimensionError):
    """Latent and condition sequences are not length-aligned."""


class FormatError(RFLabError, ValueError):
    """A binary file does not follow the expected container layout."""


class NonFiniteError(RFLabError, FloatingPointError):
    """NaN or Inf detected while checked mode is active."""


class SolverError(RFLabError, RuntimeError):
    """An ODE solve produced a non-finite state."""


class StiffnessError(SolverError):
    """Adaptive step size underflowed."""


class TrainingError(RFLabError, RuntimeError):
    """Training diverged (non-finite loss)."""


class PrerequisiteError(RFLabError, FileNotFoundError):
    """A pipeline stage needs an artifact that does not exist yet."""
