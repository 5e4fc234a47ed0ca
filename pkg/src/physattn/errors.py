"""Exception types shared across the package."""


class PhysAttnError(Exception):
    """Base class for all package errors."""


class DimensionError(PhysAttnError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(PhysAttnError, ArithmeticError):
    """A non-finite value was encountered where finite values are required."""


class ConfigError(PhysAttnError, ValueError):
    """A configuration value violates an invariant."""


class TapeError(PhysAttnError, RuntimeError):
    """Misuse of the gradient tape (e.g. a second backward pass)."""


class OracleError(PhysAttnError, RuntimeError):
    """The finite-difference oracle cannot be applied (non-deterministic function)."""


class DataError(PhysAttnError, ValueError):
    """Input data is missing, malformed, or degenerate."""


class DivergenceError(PhysAttnError, ArithmeticError):
    """A simulation or optimisation produced non-finite or runaway values."""


class TrainingError(PhysAttnError, RuntimeError):
    """The optimiser was invoked with inconsistent state."""


class UndefinedMetricError(PhysAttnError, ValueError):
    """A metric is mathematically undefined for the given inputs (e.g. R^2 of a constant)."""
