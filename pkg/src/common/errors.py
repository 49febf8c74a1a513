class TamsError(Exception):
    """Base class for every error raised by this package."""


class InvalidFractionError(TamsError, ValueError):
    pass


class TooFewGroupsError(TamsError, ValueError):
    pass


class ParameterRangeError(TamsError, ValueError):
    pass


class BadMagicError(TamsError):
    pass


class UnsupportedVersionError(TamsError):
    pass


class TruncatedFileError(TamsError):
    pass


class IntegrityError(TamsError):
    pass


class CheckpointShapeError(TamsError):
    pass


class ParameterMismatchError(TamsError, ValueError):
    pass


class InvalidSpecError(TamsError, ValueError):
    pass


class MissingGradientError(TamsError):
    pass


class BatchTooLargeError(TamsError, ValueError):
    pass


class ScoreRangeError(TamsError, ValueError):
    pass


class RewardError(TamsError, ValueError):
    pass


class MissingSuccessorError(TamsError):
    pass


class ReplayUnderflowError(TamsError):
    pass


class EmptyInputError(TamsError, ValueError):
    pass


class SingleClassError(TamsError, ValueError):
    pass


class NonBinaryMaskError(TamsError, ValueError):
    pass


class ConfigError(TamsError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class StageError(TamsError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
