"""Exception types shared across the toolkit."""


class TailquadError(Exception):
    """Base class for all toolkit errors."""


class ModelValidityError(TailquadError, ValueError):
    """A robot model or state violates a physical validity requirement."""


class SingularOrientationError(ModelValidityError):
    """Euler pitch too close to +/-90 deg for the ZYX parameterization."""


class ConfigError(TailquadError, ValueError):
    """Malformed or inconsistent configuration input."""


class DataError(TailquadError, ValueError):
    """Malformed data file (logs, heightfield CSV)."""


class SimulationDivergedError(TailquadError):
    """Simulation produced NaN/Inf state.

    Carries the last valid world state so callers can log partial results.
    """

    def __init__(self, message, last_valid_state=None):
        super().__init__(message)
        self.last_valid_state = last_valid_state
