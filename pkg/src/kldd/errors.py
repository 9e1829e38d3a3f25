"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems
exit 2, dataset problems exit 3, numeric failures exit 4.
"""


class KlddError(Exception):
    """Base class for package-specific errors."""


class ConfigError(KlddError):
    """Invalid, unknown, or out-of-range configuration input."""


class DataError(KlddError):
    """Missing or malformed dataset files."""


class NumericError(KlddError):
    """Non-finite values or other numeric breakdown during compute."""
