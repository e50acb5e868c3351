"""Exception types shared across the package."""


class GoloError(Exception):
    """Base class for all package errors."""


class ShapeError(GoloError, ValueError):
    """Operand shapes are incompatible (dimension or shape contract violated)."""


class AxisError(GoloError, ValueError):
    """An axis argument is out of range for the tensor's rank."""


class ContractError(GoloError, ValueError):
    """A documented precondition was violated."""


class EvaluationError(GoloError, ArithmeticError):
    """A function evaluated to a non-finite value."""


class ConfigError(GoloError, ValueError):
    """Invalid or unknown configuration."""


class GenerationError(GoloError, RuntimeError):
    """Synthetic scene placement could not be satisfied."""


class ParseError(GoloError, ValueError):
    """A dataset manifest violates its schema."""


class FormatError(GoloError, ValueError):
    """A checkpoint file has the wrong magic number or version."""


class TrainingAborted(GoloError, RuntimeError):
    """Training hit a non-finite loss or gradient."""


class TruncatedFile(GoloError, OSError):
    """A binary file ended in the middle of a record."""
