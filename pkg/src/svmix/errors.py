"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument outside the domain where a formula is defined."""


class UnsupportedError(ValueError):
    """Request for a derivative order, fold depth or moment order that is not supported."""


class ModelPreconditionError(ValueError):
    """Model parameters violate a precondition of the pricing formula (e.g. GARCH with rho != 0)."""


class NumericalError(RuntimeError):
    """An iterative routine failed to converge."""


class NoSolutionError(NumericalError):
    """No solution exists, e.g. an option price outside the no-arbitrage bounds."""


class StateError(RuntimeError):
    """Operator cache used out of order, or rollback past the last commit."""


class ConfigError(ValueError):
    """Inconsistent calibration or run configuration."""
