"""Theory-condition evaluation and convergence-slope fitting.

The error analysis of the nudged schemes revolves around the decay rate

    gamma = min(nu / (4 c_I^2 H^2), beta / 4),

a field-dependent quantity L built from sup norms of the reference
velocity, and advisory conditions  beta >= 8 L,  an upper bound on H,
and step-size bounds  dt <= 24/gamma (implicit BDF2) and dt <= 12/gamma
(semi-implicit).  Everything here is diagnostic: solvers never refuse
to run based on these checks.

Sup norms of discrete fields are approximated by sampling at the
degree-6 quadrature nodes plus the cell vertices; this surrogate is
flagged in the report.  The interpolation constant c_I has no known
numeric value and defaults to 1.
"""

from dataclasses import dataclass, field

import numpy as np

from .fem_assembly import (
    DEGREE_CONVECTION,
    MixedSpace,
    build_quad_tables,
    velocity_at_quad,
    velocity_gradients_at_quad,
)
from .quadrature import QuadratureRule, triangle_rule


@dataclass
class SlopeFit:
    """Least-squares line through (log x, log y) points."""

    points: list
    slope: float
    intercept: float
    residual: float  # RMS of log-space residuals


@dataclass
class TheoryReport:
    gamma: float
    L_estimate: float
    c_I_assumed: float
    delta: float
    checks: dict = field(default_factory=dict)
    notes: tuple = (
        "sup norms sampled at degree-6 quadrature nodes plus vertices",
        "conditions are advisory; runs are never refused",
    )

    def as_text(self) -> str:
        lines = [
            f"gamma = {self.gamma:.6g}",
            f"L_estimate = {self.L_estimate:.6g}",
            f"c_I_assumed = {self.c_I_assumed:.6g}",
            f"delta = {self.delta:.6g}",
        ]
        lines += [f"{name} = {str(ok).lower()}" for name, ok in self.checks.items()]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def compute_gamma(nu: float, H: float, beta: float, c_I: float = 1.0) -> float:
    """Uniform-in-time decay rate min(nu/(4 c_I^2 H^2), beta/4)."""
    if nu <= 0.0 or H <= 0.0 or beta <= 0.0 or c_I <= 0.0:
        raise ValueError("compute_gamma requires strictly positive arguments")
    return min(nu / (4.0 * c_I**2 * H**2), beta / 4.0)


def _sample_points_rule() -> QuadratureRule:
    base = triangle_rule(DEGREE_CONVECTION)
    verts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    pts = np.vstack([base.points, verts])
    w = np.full(len(pts), 0.5 / len(pts))  # weights unused for sampling
    return QuadratureRule(pts, w, 0)


_SAMPLING_RULE = _sample_points_rule()


def field_sup_norms(space: MixedSpace, coeffs: np.ndarray):
    """(max |w|, max |grad w|_F) over the sampling nodes of every cell."""
    qd = build_quad_tables(space, _SAMPLING_RULE)
    vals = velocity_at_quad(space, coeffs, qd)
    grads = velocity_gradients_at_quad(space, coeffs, qd)
    wmax = float(np.sqrt((vals**2).sum(axis=-1)).max())
    gmax = float(np.sqrt((grads**2).sum(axis=(-2, -1))).max())
    return wmax, gmax


def estimate_L(history, mu: float, nu: float, space: MixedSpace) -> float:
    """Largest L over the recorded velocity fields.

    With eps = nu (no grad-div) the per-field value is
    |grad w|_inf + |w|_inf^2 / (4 nu); with grad-div (eps = mu > 0) it is
    2 |grad w|_inf + |w|_inf^2 / (2 mu).
    """
    fields = list(history)
    if not fields:
        raise ValueError("estimate_L needs at least one recorded field")
    worst = 0.0
    for coeffs in fields:
        wmax, gmax = field_sup_norms(space, coeffs)
        if mu > 0.0:
            value = 2.0 * gmax + wmax**2 / (2.0 * mu)
        else:
            value = gmax + wmax**2 / (4.0 * nu)
        worst = max(worst, value)
    return worst


def default_delta(mu: float) -> float:
    """Semi-implicit analysis parameter: 1/12 with grad-div, 1/48 without."""
    return 1.0 / 12.0 if mu > 0.0 else 1.0 / 48.0


def check_conditions(
    nu: float,
    mu: float,
    beta: float,
    H: float,
    dt: float,
    L_estimate: float,
    c_I: float = 1.0,
    delta: float | None = None,
) -> TheoryReport:
    """Evaluate the hypothesis inequalities on computed quantities.

    All checks are non-strict and purely advisory; in practice the nudged
    runs converge even when beta >= 8 L fails.
    """
    if delta is None:
        delta = default_delta(mu)
    gamma = compute_gamma(nu, H, beta, c_I) if beta > 0.0 else 0.0
    if L_estimate > 0.0:
        h_bound = np.sqrt(nu) / (np.sqrt(8.0 * L_estimate) * c_I)
        h_ok = H <= h_bound
    else:
        h_ok = True
    checks = {
        "beta_ge_8L": beta >= 8.0 * L_estimate,
        "H_condition": bool(h_ok),
        "dt_bdf2_implicit": (dt <= 24.0 / gamma) if gamma > 0.0 else True,
        "dt_bdf2_semi": (dt <= 12.0 / gamma) if gamma > 0.0 else True,
    }
    return TheoryReport(
        gamma=gamma, L_estimate=L_estimate, c_I_assumed=c_I, delta=delta, checks=checks
    )


def fit_slope(points) -> SlopeFit:
    """Least-squares slope of log(error) against log(parameter).

    ``points`` is a sequence of (parameter, value) pairs with positive
    entries and at least two distinct abscissae.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ValueError("slope fit needs at least two points")
    if any(x <= 0.0 or y <= 0.0 for x, y in pts):
        raise ValueError("slope fit needs positive abscissae and ordinates")
    lx = np.log([x for x, _ in pts])
    ly = np.log([y for _, y in pts])
    if np.ptp(lx) == 0.0:
        raise ValueError("slope fit needs at least two distinct abscissae")
    coeffs, res, *_ = np.polyfit(lx, ly, 1, full=True)
    rms = float(np.sqrt(res[0] / len(pts))) if len(res) else 0.0
    return SlopeFit(points=pts, slope=float(coeffs[0]), intercept=float(coeffs[1]), residual=rms)


def pre_plateau_points(points, rel_change: float = 0.10):
    """Drop trailing refinements whose error no longer moves.

    ``points`` must be sorted from coarse to fine parameter.  Starting from
    the finest entry, a point is discarded while its value is within
    ``rel_change`` of its coarser neighbour (discretization error from the
    other variable dominates there); at least two points always survive.
    """
    pts = list(points)
    while len(pts) > 2:
        prev, last = pts[-2][1], pts[-1][1]
        if abs(last - prev) < rel_change * abs(prev):
            pts.pop()
        else:
            break
    return pts


def asymptotic_window_max(record, window) -> float:
    """Max relative velocity error over time levels inside [t_a, t_b]."""
    t_a, t_b = float(window[0]), float(window[1])
    times = np.asarray(record.times)
    errs = np.asarray(record.rel_vel_errors)
    inside = (times >= t_a - 1e-12) & (times <= t_b + 1e-12)
    if not inside.any():
        raise ValueError(f"no recorded steps inside window [{t_a}, {t_b}]")
    return float(errs[inside].max())


def plateau_reached(record, window_length: float, rel_tol: float = 0.05) -> bool:
    """True when the trailing window max matches the preceding one.

    Compares the error maximum over the last ``window_length`` of time with
    the maximum over the window shifted one length earlier; once the decay
    has flattened the two agree to ``rel_tol``.
    """
    if not record.times:
        return False
    t_end = record.times[-1]
    if t_end < 2.0 * window_length:
        return False
    last = asymptotic_window_max(record, (t_end - window_length, t_end))
    prior = asymptotic_window_max(
        record, (t_end - 2.0 * window_length, t_end - window_length)
    )
    if prior == 0.0:
        return last == 0.0
    return abs(last - prior) <= rel_tol * prior
