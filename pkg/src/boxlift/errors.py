"""Exception types shared across the package."""


class BoxliftError(Exception):
    """Base class for all package errors."""


class EmptyCluster(BoxliftError):
    """A box fit or merge was requested on zero points/clusters."""


class PlacementFailure(BoxliftError):
    """Non-overlapping object placement could not be satisfied."""


class ShapeMismatch(BoxliftError):
    """Tensor operands have incompatible shapes."""


class NonFiniteError(BoxliftError):
    """A tensor operation produced NaN or Inf."""


class ConfigError(BoxliftError):
    """A configuration value is invalid or inconsistent."""


class UnknownCategory(BoxliftError):
    """Category has no size prior, so no super-category can be assigned."""


class DomainError(BoxliftError):
    """A numeric argument is outside the function's domain."""


class WeightError(BoxliftError):
    """Fusion weights do not sum to one."""


class SchemaError(BoxliftError):
    """A data file failed parsing or schema validation."""


class UnsupportedVersion(SchemaError):
    """A data file declares a schema version this build does not support."""


class CheckpointError(BoxliftError):
    """A model checkpoint is malformed or incompatible."""


class ValidationError(BoxliftError):
    """A run configuration failed validation."""
