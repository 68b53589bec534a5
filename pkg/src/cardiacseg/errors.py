"""Exception types shared across the library."""


class CardiacSegError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(CardiacSegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(CardiacSegError, ValueError):
    """A layer, network, or pipeline was configured with unusable settings."""


class StateError(CardiacSegError, RuntimeError):
    """An object was used before reaching the required state."""


class UsageError(CardiacSegError, ValueError):
    """The caller violated an API contract (bad argument or call order)."""


class ValidationError(CardiacSegError, ValueError):
    """Input data failed validation."""


class FormatError(CardiacSegError, ValueError):
    """A file does not look like the expected on-disk format."""


class CorruptionError(CardiacSegError, ValueError):
    """A file matches the expected format but its payload is inconsistent."""


class NoHeartDetectedError(CardiacSegError, RuntimeError):
    """No foreground pixel found when inverting a background prediction."""


class UndefinedMetricError(CardiacSegError, ValueError):
    """A metric is undefined for the given inputs (e.g. an empty mask)."""
