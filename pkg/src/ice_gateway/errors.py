"""Exception hierarchy shared across the package."""


class IceError(Exception):
    """Base class for every error raised by ice_gateway."""


class ConfigError(IceError):
    pass


class PolicyInvalid(IceError):
    """The injection policy cannot be honoured with the current settings."""
