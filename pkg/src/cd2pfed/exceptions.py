"""Exception hierarchy shared by every module."""


class CD2Error(Exception):
    """Base class for errors raised by the package."""


class ConfigurationError(CD2Error, ValueError):
    """Invalid configuration, detected before any training starts."""


class TrainingError(CD2Error, RuntimeError):
    """Numerical failure during local training (non-finite loss or gradient)."""


class ProtocolError(CD2Error, RuntimeError):
    """Client/server exchange does not match the expected partition plan."""


class DataLoadError(CD2Error, ValueError):
    """Malformed dataset file."""
