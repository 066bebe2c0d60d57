"""Shared exception types."""


class InputError(ValueError):
    """A caller-supplied input violates a precondition."""


class PromptOverflowError(InputError):
    """A prompt tokenizes to more tokens than the backbone context length."""


class DegenerateInputError(ValueError):
    """A numerically degenerate input (e.g. zero-norm vector where cosine is needed)."""


class ParseError(ValueError):
    """A file or record failed to parse; carries a location when available."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
