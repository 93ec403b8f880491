"""Exception types shared across the package."""


class FormatError(Exception):
    """Raised when an on-disk artifact does not match its declared layout."""


class ConfigError(Exception):
    """Raised when a configuration document fails validation.

    The message lists every offending key so a bad file can be fixed in
    one pass instead of one error at a time.
    """


class TrainingDivergenceError(Exception):
    """Raised when a training loss becomes NaN or infinite."""


class UnsupportedOperationError(Exception):
    """Raised when an optional capability was invoked without its backend."""
