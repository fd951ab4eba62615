"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems -> 1, data problems -> 2,
numeric failures -> 3.
"""


class TunesmithError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(TunesmithError):
    """Invalid or inconsistent configuration (bad model config, bad vocab file)."""


class TokenizationError(TunesmithError):
    """Input cannot be tokenized with the given vocabulary."""


class DataError(TunesmithError):
    """Malformed or unusable input data."""


class CheckpointError(TunesmithError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class NumericError(TunesmithError):
    """Non-finite values or numeric divergence."""


class UsageError(TunesmithError):
    """Bad command-line usage."""
