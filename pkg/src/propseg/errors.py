"""Exception types shared across the package.

Each maps to one CLI exit code (see cli.main).
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DatasetError(IOError):
    """Missing or corrupt dataset file; message names the offending path."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the path of the diagnostic dump."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointMismatchError(RuntimeError):
    """Checkpoint manifest incompatible with the requested model or data."""


class ResultsSchemaError(ValueError):
    """Results file does not match the documented schema; names the first bad record."""
