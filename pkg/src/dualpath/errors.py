"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries step diagnostics."""

    def __init__(self, message: str, step: int, components: dict):
        super().__init__(message)
        self.step = step
        self.components = components


class FormatError(ValueError):
    """A file failed to parse; the message names the offending location."""
