"""Exception types shared across the package."""


class EffPotError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EffPotError, ValueError):
    """Invalid or incomplete parameters."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DivergenceError(EffPotError, RuntimeError):
    """A trajectory produced a non-finite or runaway state."""

    def __init__(self, message, step=None, state=None, job=None):
        super().__init__(message)
        self.step = step
        self.state = state
        self.job = job


class InsufficientDataError(EffPotError, ValueError):
    pass


class DegenerateDataError(EffPotError, ValueError):
    pass


class IllPosedFitError(EffPotError, ValueError):
    """The regression design is rank deficient somewhere in the domain."""


class ContractError(EffPotError, ValueError):
    """Inputs violate a shape or alignment contract."""
