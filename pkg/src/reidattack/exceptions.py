"""Exception hierarchy shared by every module of the toolkit."""


class ReIDAttackError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ReIDAttackError, ValueError):
    """Invalid configuration value or combination of values."""


class DatasetError(ReIDAttackError):
    """Malformed dataset directory, filename or bundle."""


class ProtocolError(ReIDAttackError):
    """Evaluation protocol cannot be applied (e.g. a query without valid matches)."""


class TrainingError(ReIDAttackError):
    """Training diverged or produced non-finite values."""


class NumericalError(ReIDAttackError):
    """Non-finite gradients or activations."""


class CheckpointError(ReIDAttackError):
    """Checkpoint missing, corrupt or incompatible with the requested architecture."""


class SelectionError(ReIDAttackError):
    """Target-class selection produced an empty candidate set."""


class BatchCompositionError(ReIDAttackError, ValueError):
    """A batch does not have the identity structure a loss requires."""
