"""Shared exception types."""


class NumericalFailure(RuntimeError):
    """A dense linear-algebra routine failed beyond recoverable tolerance."""


class BudgetExceeded(RuntimeError):
    """A requested computation exceeds the configured size budget."""


class InvalidConfig(ValueError):
    """A run configuration failed schema or consistency checks."""
