from enum import Enum


class MatcherError(Exception):
    """
    Базовая ошибка пайплайна. exit_code уходит в код возврата CLI.
    """
    exit_code = 1


class UsageError(MatcherError):
    exit_code = 2


class InvalidParameterError(MatcherError, ValueError):
    exit_code = 2


class ConfigMismatchError(MatcherError):
    exit_code = 2


class TileErrorCode(str, Enum):
    MISSING = "missing"
    DECODE = "decode"
    EMPTY = "empty"
    BIT_DEPTH = "bit_depth"
    SIZE = "size"


class TileDecodeError(MatcherError):
    exit_code = 2

    def __init__(self, code: TileErrorCode, path: str, detail: str = ""):
        self.code = code
        self.path = path
        super().__init__(f"[{code.value}] {path}: {detail}" if detail else f"[{code.value}] {path}")


class MissingPrerequisiteError(MatcherError):
    exit_code = 3


class TrainingAbortedError(MatcherError):
    exit_code = 4


class DivergenceError(TrainingAbortedError):
    pass


class NonFiniteLossError(TrainingAbortedError):
    pass


class FreezeViolationError(TrainingAbortedError):
    pass


class EstimationFailedError(MatcherError):
    """
    RANSAC не нашёл модель: меньше 4 соответствий или все выборки вырождены.
    """
    pass
