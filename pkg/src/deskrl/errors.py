"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific one that applies rather than bare ValueError.
"""


class DeskRLError(Exception):
    """Base class for all package errors."""


class ConfigError(DeskRLError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(DeskRLError):
    """Invalid corpus, pool, pair, or response data (CLI exit code 3)."""


class NumericError(DeskRLError):
    """Non-finite or otherwise unusable numeric state (CLI exit code 4)."""


class ExpressionSyntaxError(DataError):
    """Raised by the expression parser; carries position and expectation."""

    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected
