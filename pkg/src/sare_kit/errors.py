"""Exception hierarchy shared across the package."""


class SareError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SareError, ValueError):
    pass


class DegenerateGeometryError(SareError, ValueError):
    pass


class GenerationFailureError(SareError, RuntimeError):
    pass


class NumericError(SareError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, total: float):
        super().__init__(f"training diverged at epoch {epoch}: total loss {total:.4g}")
        self.epoch = epoch
        self.total = total


class ParseError(SareError, ValueError):
    """Raised when an on-disk artifact cannot be read."""


class SchemaError(ParseError):
    pass


class VersionMismatchError(ParseError):
    pass


class TruncatedFileError(ParseError):
    def __init__(self, path, section: str):
        super().__init__(f"{path}: truncated file, missing section '{section}'")
        self.section = section


class ChecksumError(ParseError):
    pass


class ConfigError(SareError, ValueError):
    pass


class ArtifactError(SareError, RuntimeError):
    """Missing or mismatched upstream artifact."""
