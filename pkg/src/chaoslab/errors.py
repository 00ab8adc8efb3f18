"""Exception types shared across the package and mapped to CLI exit codes."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid study/simulation configuration (CLI exit code 1)."""


class CheckFailure(RuntimeError):
    """A verification suite reported a hard failure (CLI exit code 2)."""


class NumericalAbort(RuntimeError):
    """A simulation produced a non-finite state (CLI exit code 3)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class SolverCapError(ValueError):
    """A transport instance exceeds the exact-solver size caps."""
