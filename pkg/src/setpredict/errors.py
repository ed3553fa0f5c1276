"""Exceptions that map to the CLI's non-usage exit codes."""


class DataError(Exception):
    """Malformed or inconsistent input data (exit code 2)."""


class NumericError(Exception):
    """Non-finite values in the numerical core (exit code 3)."""
