"""Exception types for solver failures.

Invalid arguments and inconsistent state raise plain ``ValueError``;
the classes below cover failures of the numerics themselves.
"""


class SingularSystemError(RuntimeError):
    """Linear system is singular (or numerically rank deficient)."""


class ConvergenceFailureError(RuntimeError):
    """An iterative solve stopped before reaching its tolerance.

    Carries the residual that was achieved so callers can report it.
    """

    def __init__(self, message: str, achieved_residual: float = float("nan")):
        super().__init__(message)
        self.achieved_residual = achieved_residual


class NonlinearDivergenceError(RuntimeError):
    """Picard iteration exceeded its iteration budget.

    ``diagnostics`` holds the per-iterate update norms for post-mortems.
    """

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics if diagnostics is not None else []


class DegenerateReferenceError(ZeroDivisionError):
    """Relative error requested against a reference field with zero norm."""
