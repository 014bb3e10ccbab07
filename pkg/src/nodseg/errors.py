"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A file does not conform to its expected on-disk format."""


class TruncationError(FormatError):
    """A raw data file is shorter or longer than its header promises."""


class IntegrityError(ValueError):
    """A dataset violates one of its manifest invariants."""


class PlacementError(ValueError):
    """An annotation falls outside the volume it belongs to."""


class ConfigurationError(ValueError):
    """An invalid configuration value, with the offending key named."""


class CheckpointError(RuntimeError):
    """A checkpoint cannot be loaded into the current model."""


class TrainingAbort(RuntimeError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, epoch: int, batch_index: int, message: str = "non-finite loss"):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"{message} at epoch {epoch}, batch {batch_index}")
