"""Exception hierarchy shared across the toolkit."""


class OsrKitError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(OsrKitError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(OsrKitError):
    """A configuration value is inconsistent or unusable."""


class ContractError(OsrKitError):
    """An API was called in a way its contract forbids."""


class ProtocolError(OsrKitError):
    """A pipeline step ran out of order or on unusable data."""


class FormatError(OsrKitError):
    """An on-disk artifact does not match its documented byte layout."""
