"""Manufactured pulsating-gyre solution on the unit square.

The velocity derives from the stream function

    psi(x, y, t) = 8 * g(t) * sin(pi x)^2 * (y (1-y))^2,
    g(t) = (6 + 4 cos(4 t)) / 10,

so it is pointwise divergence free, vanishes on the boundary, and is
time periodic with period pi/2.  The pressure is
g(t) * sin(pi x) cos(pi y), which has zero mean.  The forcing below is
the closed form of  u_t - nu Lap(u) + (u . grad) u + grad p  (derived
offline and validated against a finite-difference oracle in the tests);
evaluating it directly keeps the quadrature loops free of symbolic
machinery.  All functions accept numpy arrays and are reentrant.
"""

from dataclasses import dataclass

import numpy as np

from .fem_assembly import MixedSpace, interpolate_pressure, interpolate_velocity

PERIOD = np.pi / 2.0


def amplitude(t: float) -> float:
    return 0.6 + 0.4 * np.cos(4.0 * t)


def amplitude_derivative(t: float) -> float:
    return -1.6 * np.sin(4.0 * t)


def velocity(x, y, t):
    g = amplitude(t)
    s = np.sin(np.pi * x)
    q = y * (1.0 - y)
    qp = 1.0 - 2.0 * y
    u1 = 16.0 * g * s * s * q * qp
    u2 = -8.0 * np.pi * g * np.sin(2.0 * np.pi * x) * q * q
    return u1, u2


def velocity_time_derivative(x, y, t):
    gp = amplitude_derivative(t)
    s = np.sin(np.pi * x)
    q = y * (1.0 - y)
    qp = 1.0 - 2.0 * y
    return (
        16.0 * gp * s * s * q * qp,
        -8.0 * np.pi * gp * np.sin(2.0 * np.pi * x) * q * q,
    )


def velocity_gradient(x, y, t):
    """Entries (du1/dx, du1/dy, du2/dx, du2/dy)."""
    g = amplitude(t)
    s = np.sin(np.pi * x)
    s2 = np.sin(2.0 * np.pi * x)
    c2 = np.cos(2.0 * np.pi * x)
    q = y * (1.0 - y)
    qp = 1.0 - 2.0 * y
    d11 = 16.0 * np.pi * g * s2 * q * qp
    d12 = 16.0 * g * s * s * (qp * qp - 2.0 * q)
    d21 = -16.0 * np.pi**2 * g * c2 * q * q
    d22 = -16.0 * np.pi * g * s2 * q * qp
    return d11, d12, d21, d22


def velocity_laplacian(x, y, t):
    g = amplitude(t)
    s = np.sin(np.pi * x)
    s2 = np.sin(2.0 * np.pi * x)
    c2 = np.cos(2.0 * np.pi * x)
    q = y * (1.0 - y)
    qp = 1.0 - 2.0 * y
    lap1 = 32.0 * np.pi**2 * g * c2 * q * qp - 96.0 * g * s * s * qp
    lap2 = 32.0 * np.pi**3 * g * s2 * q * q - 16.0 * np.pi * g * s2 * (qp * qp - 2.0 * q)
    return lap1, lap2


def pressure(x, y, t):
    return amplitude(t) * np.sin(np.pi * x) * np.cos(np.pi * y)


def pressure_gradient(x, y, t):
    g = amplitude(t)
    return (
        np.pi * g * np.cos(np.pi * x) * np.cos(np.pi * y),
        -np.pi * g * np.sin(np.pi * x) * np.sin(np.pi * y),
    )


def forcing(x, y, t, nu):
    """Body force making the pulsating gyre solve the Navier-Stokes system."""
    u1, u2 = velocity(x, y, t)
    ut1, ut2 = velocity_time_derivative(x, y, t)
    d11, d12, d21, d22 = velocity_gradient(x, y, t)
    lap1, lap2 = velocity_laplacian(x, y, t)
    px, py = pressure_gradient(x, y, t)
    f1 = ut1 - nu * lap1 + u1 * d11 + u2 * d12 + px
    f2 = ut2 - nu * lap2 + u1 * d21 + u2 * d22 + py
    return f1, f2


def stokes_forcing(x, y, t, nu):
    """Force for the steady Stokes operator: -nu Lap(u) + grad p at time t."""
    lap1, lap2 = velocity_laplacian(x, y, t)
    px, py = pressure_gradient(x, y, t)
    return -nu * lap1 + px, -nu * lap2 + py


@dataclass(frozen=True)
class ManufacturedSolution:
    """Bundle of analytic closures consumed by the run driver.

    ``forcing(x, y, t, nu)`` must return the body force of the flow whose
    velocity/pressure the other closures describe.
    """

    velocity: callable
    pressure: callable
    forcing: callable
    amplitude: callable
    period: float


def standard_solution() -> ManufacturedSolution:
    return ManufacturedSolution(
        velocity=velocity,
        pressure=pressure,
        forcing=forcing,
        amplitude=amplitude,
        period=PERIOD,
    )


INITIAL_DATA_MODES = ("zero", "exact_interpolant")


def project_initial_data(space: MixedSpace, mode: str, t0: float = 0.0, solution=None):
    """Initial discrete state: all zeros, or the nodal interpolant at t0.

    Returns a timestepping.DiscreteState with step index 0 and no history.
    The interpolated pressure is shifted to zero mean.
    """
    from .timestepping import DiscreteState

    if mode == "zero":
        u = np.zeros(space.n_vel)
        p = np.zeros(space.n_pres)
    elif mode == "exact_interpolant":
        sol = solution if solution is not None else standard_solution()
        u = interpolate_velocity(space, sol.velocity, t0)
        p = interpolate_pressure(space, sol.pressure, t0)
    else:
        raise ValueError(f"unknown initial data mode {mode!r}; use one of {INITIAL_DATA_MODES}")
    return DiscreteState(u=u, p=p, t_index=0, history=())
