"""Exception types shared across the package.

The CLI maps these onto process exit codes (usage errors are handled by
argparse itself): DataError -> 2, NumericalError -> 3.
"""


class DataError(Exception):
    """Malformed or inconsistent input data (headers, payloads, shapes)."""


class NumericalError(Exception):
    """Non-finite values or invalid numerical state detected at runtime."""
