"""
Exception types raised across the toolkit.

Every error carries the process exit code the command-line interface uses
when the error escapes a command:

    2  invalid arguments / configuration
    3  missing or corrupt input
    4  configuration mismatch
    5  numerical divergence or a failed gradient check
"""

from __future__ import annotations

from typing import Any, Optional


class PsgMaeError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


# Invalid arguments (exit code 2)

class InvalidConfig(PsgMaeError, ValueError):
    exit_code = 2


class NonDivisibleLength(PsgMaeError, ValueError):
    exit_code = 2


class TooFewPatches(PsgMaeError, ValueError):
    exit_code = 2


class EmptyChannel(PsgMaeError, ValueError):
    exit_code = 2


class DimensionMismatch(PsgMaeError, ValueError):
    exit_code = 2


class ShapeMismatch(PsgMaeError, ValueError):
    exit_code = 2


class TooFewChannels(PsgMaeError, ValueError):
    exit_code = 2


class NotStochastic(PsgMaeError, ValueError):
    exit_code = 2


class TooFewEpochs(PsgMaeError, ValueError):
    exit_code = 2


class TooFewSubjects(PsgMaeError, ValueError):
    exit_code = 2


class MissingCategory(PsgMaeError, ValueError):
    exit_code = 2


class LabelOutOfRange(PsgMaeError, ValueError):
    exit_code = 2


class LengthMismatch(PsgMaeError, ValueError):
    exit_code = 2


class EmptyMatrix(PsgMaeError, ValueError):
    exit_code = 2


# Missing or corrupt input (exit code 3)

class IoFailure(PsgMaeError, OSError):
    exit_code = 3


class FormatViolation(PsgMaeError, ValueError):
    """Malformed recording or checkpoint file."""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumMismatch(PsgMaeError, ValueError):
    exit_code = 3


# Configuration mismatch (exit code 4)

class ConfigMismatch(PsgMaeError, ValueError):
    exit_code = 4


class LabelModeMismatch(PsgMaeError, ValueError):
    exit_code = 4


# Numerical divergence (exit code 5)

class NonFiniteActivation(PsgMaeError, ArithmeticError):
    exit_code = 5

    def __init__(self, message: str, layer: Optional[int] = None):
        if layer is not None:
            message = f"{message} (encoder layer {layer})"
        super().__init__(message)
        self.layer = layer


class DivergenceDetected(PsgMaeError, ArithmeticError):
    exit_code = 5

    def __init__(self, message: str, step: int, last_good: Any = None):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.last_good = last_good


class GradientCheckFailed(PsgMaeError, ArithmeticError):
    """Analytic gradients disagree with finite differences."""

    exit_code = 5

    def __init__(self, max_relative_error: float, failing: Any = ()):
        names = ", ".join(failing)
        super().__init__(f"Gradient check failed: max relative error {max_relative_error:.3e} ({names})")
        self.max_relative_error = max_relative_error
        self.failing = list(failing)
