"""Exception hierarchy shared across the package.

CLI exit codes: 0 ok, 2 config error, 3 data/input error, 4 training
divergence, 1 anything else.
"""


class DefenseError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(DefenseError):
    """Invalid or inconsistent configuration values."""

    exit_code = 2


class DataError(DefenseError):
    """Unreadable, corrupt, or insufficient data (files or arrays)."""

    exit_code = 3


class InputError(DataError):
    """Malformed in-memory inputs: bad shapes, dtypes, or value ranges."""


class StateError(DefenseError):
    """Operation attempted in an invalid object state."""

    exit_code = 3


class CapabilityError(DefenseError):
    """The model cannot provide a required capability (e.g. dropout)."""

    exit_code = 3


class TrainingError(DefenseError):
    """Training or adaptation diverged or missed its accuracy floor."""

    exit_code = 4
