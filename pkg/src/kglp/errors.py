"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class KglpError(Exception):
    pass


class UsageError(KglpError):
    pass


class DataError(KglpError):
    """Malformed, missing, or inconsistent input data / file formats."""


class NumericError(KglpError):
    """Non-finite values encountered where finite math is required."""
