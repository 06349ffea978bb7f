"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters for a schedule, target, plan or experiment."""


class DimensionError(ValueError):
    """Array shapes that do not line up."""


class DivergenceError(RuntimeError):
    """Adaptive integration failed or the optimisation produced non-finite state."""
