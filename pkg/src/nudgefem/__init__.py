"""Nudged 2D incompressible Navier-Stokes solver with Taylor-Hood elements.

A coarse-mesh observation penalty drives the computed velocity towards a
reference flow.  The package provides structured triangulations of the unit
square, P2/P1 mixed finite element assembly with optional grad-div
stabilization, implicit Euler / BDF2 / semi-implicit BDF2 time stepping,
sparse direct saddle-point solves with a zero-mean pressure gauge, and a
manufactured-solution experiment harness with convergence diagnostics.
"""

from .errors import (
    ConvergenceFailureError,
    DegenerateReferenceError,
    NonlinearDivergenceError,
    SingularSystemError,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceFailureError",
    "DegenerateReferenceError",
    "NonlinearDivergenceError",
    "SingularSystemError",
    "__version__",
]
