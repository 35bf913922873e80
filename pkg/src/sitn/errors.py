"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or key is invalid. Treated as a usage error by the CLI."""


class DataError(ValueError):
    """A dataset violates one of its structural invariants."""


class EmptyDatasetError(DataError):
    """Ingestion or filtering left zero usable users."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt, or has an unknown format."""


class ShapeMismatchError(CheckpointError):
    """A checkpoint tensor does not match the model it is being restored into."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. AUC on a single class)."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
