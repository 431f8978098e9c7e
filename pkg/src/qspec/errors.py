"""Exception hierarchy shared by all qspec modules."""

from __future__ import annotations


class QSpecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QSpecError):
    """Operands have incompatible shapes, dtypes, or arity."""


class ConfigError(QSpecError):
    """A configuration value violates an invariant (e.g. group divisibility)."""


class SequenceOverflowError(QSpecError):
    """A forward pass or generation request would exceed sequence capacity."""


class TokenIdError(QSpecError):
    """A token id is outside the model vocabulary."""


class CheckpointError(QSpecError):
    """A checkpoint file is malformed, truncated, or inconsistent."""


class WorkloadError(QSpecError):
    """A workload file line cannot be parsed or validated."""


class ProfileError(QSpecError):
    """A latency profile is malformed or queried outside its range."""


class TraceError(QSpecError):
    """A cycle-trace line cannot be parsed or is inconsistent."""
