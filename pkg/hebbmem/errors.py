#==========================================================
# HebbmemError and the error kinds raised across the package
#==========================================================

from __future__ import annotations


class HebbmemError(Exception):
    """Base class for every error raised by hebbmem."""


class ArgumentError(HebbmemError, ValueError):
    """A caller passed a value outside the documented domain."""


class StructuralError(HebbmemError):
    """The differentiation graph is malformed (cycle, gradient shape mismatch)."""


class StateError(HebbmemError, RuntimeError):
    """An object was used before it was fully set up."""


class NumericError(HebbmemError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointError(HebbmemError):
    """A checkpoint is missing, corrupt, or does not match the expected layout."""


class ConfigError(HebbmemError):
    """Invalid configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
