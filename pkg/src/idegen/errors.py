"""Exception hierarchy shared by every subsystem."""


class IdeError(Exception):
    """Base class for package errors."""


class DimensionError(IdeError, ValueError):
    pass


class ContractError(IdeError, RuntimeError):
    pass


class NumericError(IdeError, FloatingPointError):
    pass


class VocabularyError(IdeError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "vocabulary error"


class ConfigError(IdeError, ValueError):
    pass


class CheckpointError(IdeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DataError(IdeError):
    """Dataset or manifest inconsistency."""


class PrerequisiteError(IdeError):
    """A required input (checkpoint, dataset) does not exist."""
