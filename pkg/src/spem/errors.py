"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class FormatError(ValueError):
    """A data or checkpoint file is malformed."""


class DegenerateCoefficientError(ArithmeticError):
    """Mix coefficient with p0 = p1 = 0; lambda is undefined."""


class StateError(RuntimeError):
    """Optimizer or model state is inconsistent with the requested step."""
