"""Shared exception types; the CLI maps these onto exit codes."""


class ConfigError(ValueError):
    """Invalid, inconsistent, or out-of-scope configuration (exit code 2)."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (exit code 3)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CheckpointError(RuntimeError):
    """Unreadable, tampered, or incompatible checkpoint/weights file (exit code 4)."""
