"""Error types shared across the pipeline."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DataLoadError(RuntimeError):
    """Dataset files missing or corrupt."""


class InsufficientDataError(ValueError):
    """Not enough samples to carry out the requested operation."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DependencyError(RuntimeError):
    """A pipeline stage was requested before its upstream stage produced artifacts."""

    def __init__(self, stage, missing):
        super().__init__(f"stage '{stage}' requires artifacts from stage '{missing}' which have not been produced")
        self.stage = stage
        self.missing = missing
