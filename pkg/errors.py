"""
errors.py - Exception hierarchy shared by every module.

main.py maps these to process exit codes:
- ConfigError  -> 1
- DataError    -> 2
- NumericError -> 3
"""

from typing import Optional


class InfluenceADError(Exception):
    """Base class for every error raised on purpose by this package"""


class ConfigError(InfluenceADError, ValueError):
    """Invalid configuration, unknown loss descriptor or incompatible scorer"""


class ShapeError(InfluenceADError, ValueError):
    """Dimension or parameter-layout mismatch"""

    def __init__(self, what: str, expected, got):
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class DomainError(InfluenceADError, ValueError):
    """Argument outside the mathematical domain of an operation"""


class DataError(InfluenceADError, ValueError):
    """Problem with input data or files on disk"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(f"{message}{location}")


class SchemaError(DataError):
    """Wrong column count or empty source file"""


class ParseError(DataError):
    """Value that cannot be parsed as a number"""


class RecipeError(DataError):
    """Recipe whose class definition yields an unusable split"""


class StoreError(DataError):
    """Base class for checkpoint/split file problems"""


class CorruptStoreError(StoreError):
    """Truncated file, bad magic bytes or unknown format version"""


class IncompatibleCheckpointError(StoreError):
    """Checkpoint store written for a different model"""


class NumericError(InfluenceADError, ArithmeticError):
    """Non-finite values where finite ones are required"""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        self.sample_index = sample_index
        if sample_index is not None:
            message = f"{message} (sample {sample_index})"
        super().__init__(message)


class DivergenceError(NumericError):
    """Training loss became NaN or infinite"""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss={loss}")
