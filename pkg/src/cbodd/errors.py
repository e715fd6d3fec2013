"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; library code raises them
directly so callers can distinguish bad configuration from bad data or
bad artifacts.
"""


class CboddError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CboddError):
    """Array extents are incompatible with the requested operation."""


class RankError(CboddError):
    """An array has the wrong number of axes."""


class NumericError(CboddError):
    """Non-finite values where finite ones are required."""


class ConfigError(CboddError):
    """Invalid configuration value or flag combination."""


class StateError(CboddError):
    """Optimizer or model state is missing or inconsistent."""


class BatchError(CboddError):
    """Empty or malformed batch."""


class LabelError(CboddError):
    """Classification label outside {0, 1}."""


class CompletenessError(CboddError):
    """A required branch or component is missing."""


class InputError(CboddError):
    """Empty or otherwise unusable operation input."""


class MetricError(CboddError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class DataError(CboddError):
    """Corrupt or unreadable corpus / checkpoint data."""


class LeakageError(CboddError):
    """Train/test contamination detected by a protocol runner."""


class ArtifactMismatchError(CboddError):
    """An artifact's embedded config digest does not match expectations."""


class VerificationError(CboddError):
    """A verification suite (gradient check) exceeded its tolerance."""
