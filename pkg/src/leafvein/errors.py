class LeafveinError(Exception):
    """Base class for pipeline errors."""


class ConfigError(LeafveinError):
    """Invalid configuration, missing paths or unusable settings."""


class DataError(LeafveinError):
    """A dataset or image that cannot be used as given."""


class WeightsUnavailableError(LeafveinError):
    """Pretrained backbone weights could not be retrieved."""


class NonFiniteLossError(LeafveinError):
    """Training produced a NaN or infinite loss."""
