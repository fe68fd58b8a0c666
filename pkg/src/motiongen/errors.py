"""Failure categories surfaced by the CLI as distinct exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 1)."""


class EmptyGenerationError(RuntimeError):
    """The model produced an empty motion (exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values or divergence during training (exit code 3)."""
