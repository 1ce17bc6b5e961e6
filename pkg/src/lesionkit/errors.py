"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Input violates a documented precondition or schema."""


class TrainingDivergenceError(RuntimeError):
    """A training loop produced a non-finite loss."""
