class AgeKitError(Exception):
    """Base class for user-facing errors (bad input, bad configuration)."""


class ConfigError(AgeKitError):
    pass


class DataError(AgeKitError):
    pass
