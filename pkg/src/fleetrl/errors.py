"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, range, state)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared inside a numeric routine."""

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where


class ConfigError(ValueError):
    """Missing or inconsistent configuration / prerequisite artifact."""


class ReliabilityError(RuntimeError):
    """Episode accounting or ordering guarantee violated."""
