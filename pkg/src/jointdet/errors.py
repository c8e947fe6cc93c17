"""Exception types shared across the package."""


class JointdetError(Exception):
    """Base class for all package errors."""


class ShapeError(JointdetError):
    """Array shape or dimension does not match the expected contract."""


class ValidationError(JointdetError):
    """Input values violate a precondition (non-finite, out of range, ...)."""


class ContractError(JointdetError):
    """API misuse: required fields missing or inputs inconsistent."""


class DegenerateGeometryError(JointdetError):
    """Geometry too degenerate to proceed (no correspondences, no consensus)."""


class UndefinedMetricError(JointdetError):
    """Metric is undefined for the given inputs (e.g. empty point sets)."""


class IngestionError(JointdetError):
    """Dataset files missing or malformed."""


class CheckpointError(JointdetError):
    """Checkpoint cannot be loaded (version or config mismatch, corrupt file)."""


class UsageError(JointdetError):
    """Bad command line or config file input."""
