"""Exception types shared across the toolkit."""


class RiaError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(RiaError):
    """Invalid configuration: unknown template, bad hyperparameter, empty class."""


class InputError(RiaError):
    """Malformed runtime input: wrong shape, out-of-range index, bad target size."""


class DataError(RiaError):
    """Dataset-level problem: missing path, unreadable layout."""


class StaleCacheError(RiaError):
    """Detection cache was produced by a different detector configuration."""
