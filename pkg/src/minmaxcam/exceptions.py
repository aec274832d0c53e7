"""Exception types shared across the package."""


class MinMaxCAMError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(MinMaxCAMError, ValueError):
    pass


class InvalidArgumentError(MinMaxCAMError, ValueError):
    pass


class MissingGradientError(MinMaxCAMError, RuntimeError):
    pass


class InvalidSpecError(MinMaxCAMError, ValueError):
    pass


class LoadError(MinMaxCAMError, IOError):
    """Malformed or missing on-disk artifact."""


class IntegrityError(LoadError):
    """On-disk artifact is readable but internally inconsistent."""


class ConfigError(MinMaxCAMError, ValueError):
    pass
