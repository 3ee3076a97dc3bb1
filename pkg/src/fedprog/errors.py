"""Exception hierarchy shared across the package."""


class FedprogError(Exception):
    """Base class for all package errors."""


class ShapeError(FedprogError, ValueError):
    """Array or parameter-block dimensions are incompatible."""


class ContractError(FedprogError, RuntimeError):
    """An operation was called outside its valid protocol state."""


class NumericError(FedprogError, ArithmeticError):
    """Non-finite values where finite numbers are required."""


class DataError(FedprogError, ValueError):
    """Bad input data: parse failures, impossible generation parameters."""


class ConfigError(FedprogError, ValueError):
    """Invalid or incomplete experiment configuration."""


class StageError(FedprogError, RuntimeError):
    """An experiment stage failed; carries the stage name for the report."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
