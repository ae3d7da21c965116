"""Exception hierarchy shared across the simulator."""


class DecHWError(Exception):
    """Base class for all simulator errors."""


class ConfigError(DecHWError, ValueError):
    """Invalid or unsupported configuration value."""


class DimensionError(DecHWError, ValueError):
    """Array lengths or shapes do not line up."""


class DataError(DecHWError, ValueError):
    """Labels or samples outside the admissible range."""


class IngestionError(DataError):
    """A dataset file could not be parsed."""


class ProtocolError(DecHWError, ValueError):
    """A neighbor message is missing a required field."""
