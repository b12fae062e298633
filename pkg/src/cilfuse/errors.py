"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class SpecError(ValueError):
    """A scenario / experiment specification is infeasible or malformed."""


class DegenerateDataError(ValueError):
    """Input data admits no meaningful answer (e.g. all points identical)."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss or parameters)."""


class NumericError(ArithmeticError):
    """A numeric routine produced or encountered a non-finite value."""


class FormatError(ValueError):
    """A binary or JSON artifact violates its declared format."""


class ConfigError(ValueError):
    """An experiment config file failed validation."""


class ReportError(RuntimeError):
    """Report rendering is missing required run artifacts."""
