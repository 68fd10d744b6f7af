"""Exception hierarchy. Every error knows the exit code the CLI reports."""
from typing import Optional


class MtbError(Exception):
    exit_code: int = 1


class ConfigError(MtbError):
    exit_code = 2


class PreconditionError(MtbError, ValueError):
    exit_code = 2


class DataError(MtbError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(
            f"line {line_no}: {message}" if line_no is not None else message
        )


class LabelError(DataError):
    pass


class EmptyLossError(DataError):
    pass


class NumericError(MtbError):
    exit_code = 4

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(
            f"step {step}: {message}" if step is not None else message
        )


class ShapeError(NumericError, ValueError):
    pass


class StateError(NumericError):
    pass


class OracleError(NumericError):
    pass


class EvalError(NumericError):
    pass


class IoError(MtbError):
    exit_code = 5


class FormatError(IoError):
    pass


class VersionError(FormatError):
    pass


class CorruptError(FormatError):
    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        super().__init__(
            f"tensor {tensor}: {message}" if tensor is not None else message
        )


EXIT_CODES = {
    "ok": 0,
    "config": ConfigError.exit_code,
    "data": DataError.exit_code,
    "numeric": NumericError.exit_code,
    "io": IoError.exit_code,
}
