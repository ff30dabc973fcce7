"""
Exception types raised by the moelora package.

Everything derives from ValueError so callers that only guard against bad input
keep working; the outer surfaces (CLI, MCP tools) translate these into exit codes
and error payloads.
"""


class MoeLoraError(ValueError):
    """Base class for all moelora errors."""


class DimensionMismatchError(MoeLoraError):
    """Raised when matrix or vector shapes are incompatible."""


class SingularMatrixError(MoeLoraError):
    """Raised when a (damped) matrix cannot be inverted."""


class NonFiniteError(MoeLoraError):
    """Raised when a NaN or Inf shows up in a result, gradient or loss."""


class RoutingModeError(MoeLoraError):
    """Raised when an operation needs matrix-mode gates but got token routing."""


class ConfigError(MoeLoraError):
    """Raised for unknown keys, bad values or violated config constraints."""
