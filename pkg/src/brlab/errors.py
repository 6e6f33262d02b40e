"""Exception hierarchy shared across the package."""


class BrlabError(Exception):
    """Base class for all package errors."""


class ParameterError(BrlabError, ValueError):
    """An argument is outside its documented domain."""


class ValidationError(BrlabError, ValueError):
    """A data object violates one of its invariants."""


class ParseError(BrlabError, ValueError):
    """A serialized record could not be decoded."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GenerationError(BrlabError, RuntimeError):
    """Dataset generation could not satisfy a hard requirement."""


class SizeError(BrlabError, ValueError):
    """Problem too large for an exhaustive solver."""


class TrainingError(BrlabError, RuntimeError):
    """Gradient-based training diverged."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class ReportError(BrlabError, ValueError):
    """A diagnostic could not be computed from the given data."""
