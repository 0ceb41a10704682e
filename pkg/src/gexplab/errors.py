"""Exception taxonomy shared by all modules.

Usage errors are caller mistakes (bad shapes, violated preconditions,
invalid configuration); numerical errors are failures of the computation
itself (non-PSD matrices, diverging iterations, singular solves). The CLI
maps them to distinct exit codes.
"""


class UsageError(ValueError):
    """Raised when inputs violate a documented precondition."""


class ConfigError(UsageError):
    """Invalid experiment configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(RuntimeError):
    """Raised when a numerical procedure fails or does not converge."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)
