import numpy as np


class NumericalError(ArithmeticError):
    """A linear-algebra routine could not produce a trustworthy result."""


class NotPositiveDefiniteError(NumericalError, np.linalg.LinAlgError):
    """Cholesky factorisation failed even after the full jitter ladder."""


class StateError(ValueError):
    """A variational state violates the preconditions of an operation."""
