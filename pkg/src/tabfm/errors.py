"""Exception hierarchy shared across the package."""


class TabfmError(Exception):
    """Base class for all tabfm errors."""


class SchemaError(TabfmError):
    """Invalid feature schema (bad kind, duplicate names, broken group references)."""


class DatasetError(TabfmError):
    """Dataset file does not conform to its schema (header mismatch, bad cells,
    missing value under a reject policy)."""


class ShapeError(TabfmError):
    """Array arguments are inconsistent with the model/schema shapes."""


class CheckpointError(TabfmError):
    """Checkpoint file is corrupt, has the wrong version, or a mismatched schema."""


class TrainingDivergedError(TabfmError):
    """Training produced a non-finite loss; carries diagnostics in the message."""


class NumericalError(TabfmError):
    """A forward pass produced non-finite scores."""


class FoldBalanceError(TabfmError):
    """Fold assignment could not satisfy the balance tolerances; the message
    reports the achieved deviations."""


class LeakageError(TabfmError):
    """Patient ids overlap across train/validation/test splits."""


class SearchError(TabfmError):
    """Hyperparameter search failed (e.g. every trial diverged)."""


class CohortSpecError(TabfmError):
    """Synthetic cohort specification is degenerate or out of range."""
