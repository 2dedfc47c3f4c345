"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """An input dataset violates the CSV schema or a dataset invariant."""


class NumericalError(RuntimeError):
    """An internal numerical failure (divergence, projection failure, ...)."""


class DivergenceError(NumericalError):
    """A fit iterate left the admissible region (|component| > 1e6)."""


class TruncationError(NumericalError):
    """The truncated stochastic approximation restarted too many times."""


class OracleScaleError(ValueError):
    """A quadrature oracle was requested beyond its feasible problem size."""
