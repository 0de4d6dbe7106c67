"""Exception types shared across the package."""


class ConfigError(Exception):
    """A configuration value is missing, unknown, or out of its legal range."""


class CheckpointError(Exception):
    """A checkpoint file is missing or cannot be read."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; message carries step diagnostics."""
