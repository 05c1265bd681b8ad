"""Fully discrete schemes driving the nudged flow.

Three schemes share one infrastructure: implicit Euler, implicit BDF2
and semi-implicit BDF2.  The implicit schemes freeze the convection
field at the previous Picard iterate and re-solve until the update is
small in the mass norm; the semi-implicit scheme evaluates convection
at the extrapolation 2*u_prev - u_prev2 and needs exactly one linear
solve per step.  BDF2 starts with one implicit-Euler step (the
semi-implicit variant freezes its first-step convection at the initial
velocity).

A single run is strictly sequential; distinct runs may execute
concurrently over shared immutable meshes and operators.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonlinearDivergenceError
from .fem_assembly import OperatorSet, assemble_load, l2_error_against_analytic
from .linsolve import SaddleStepSolver, SolverSettings
from .mms import ManufacturedSolution, project_initial_data, standard_solution
from .observer import NudgingMatrixSpec, nudging_load, observe_exact

SCHEMES = ("euler_implicit", "bdf2_implicit", "bdf2_semi_implicit")


@dataclass
class PicardSettings:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_iter: int = 100

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("picard.max_iter must be >= 1")


@dataclass
class SchemeConfig:
    scheme: str
    dt: float
    T: float
    picard: PicardSettings = field(default_factory=PicardSettings)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.T < self.dt:
            raise ValueError("final time must be at least one step")

    @property
    def num_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass(eq=False)
class DiscreteState:
    """Solution at one time level plus the history multistep schemes need.

    ``u`` is the velocity at step ``t_index``; ``history`` holds up to two
    older velocity vectors, newest first.
    """

    u: np.ndarray
    p: np.ndarray
    t_index: int
    history: tuple = ()


@dataclass
class RunRecord:
    """Per-step diagnostics of one run (lists include the initial level)."""

    times: list = field(default_factory=list)
    rel_vel_errors: list = field(default_factory=list)
    div_norms: list = field(default_factory=list)
    picard_iters: list = field(default_factory=list)
    wall_time: float = 0.0

    def append(self, t, err, div, iters):
        self.times.append(float(t))
        self.rel_vel_errors.append(float(err))
        self.div_norms.append(float(div))
        self.picard_iters.append(int(iters))

    def write_csv(self, path, header_lines=()) -> None:
        """CSV emission: '#' comment header, then one row per time level."""
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t,rel_err_vel,div_norm,picard_iters\n")
            for t, e, d, k in zip(
                self.times, self.rel_vel_errors, self.div_norms, self.picard_iters
            ):
                fh.write(f"{t:.17g},{e:.17g},{d:.17g},{k}\n")


class Stepper:
    """Owns right-hand-side assembly and stepping for one configuration.

    ``step_solver`` may be substituted (anything exposing
    ``solve(c0, w, rhs) -> (u, p, info)``) to drive the schemes on reduced
    systems, e.g. mass-only sanity problems in the test-suite.
    """

    def __init__(
        self,
        ops: OperatorSet,
        scheme: SchemeConfig,
        solution: ManufacturedSolution | None = None,
        nudge: NudgingMatrixSpec | None = None,
        solver: SolverSettings | None = None,
        step_solver=None,
        forcing=None,
    ):
        self.ops = ops
        self.space = ops.space
        self.scheme = scheme
        self.solution = solution if solution is not None else standard_solution()
        self.nudge = nudge if (nudge is not None and nudge.beta > 0.0) else None
        self.step_solver = (
            step_solver if step_solver is not None else SaddleStepSolver(ops, solver)
        )
        # forcing override for verification problems; defaults to the
        # manufactured body force at the operator set's viscosity
        if forcing is not None:
            self._forcing = forcing
        else:
            nu = ops.nu
            sol_forcing = self.solution.forcing
            self._forcing = lambda x, y, t: sol_forcing(x, y, t, nu)

    # -- right-hand sides -------------------------------------------------

    def _external_load(self, t: float) -> np.ndarray:
        rhs = assemble_load(self.space, self._forcing, t)
        if self.nudge is not None:
            obs = observe_exact(self.nudge.observer, self.solution.velocity, t)
            rhs = rhs + nudging_load(self.nudge, obs)
        return rhs

    def _mass_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.ops.M @ v), 0.0)))

    def _picard(self, c0: float, rhs: np.ndarray, w0: np.ndarray):
        """Convection-lagged fixed point iteration; returns (u, p, iters)."""
        cfg = self.scheme.picard
        w = w0
        updates = []
        for k in range(1, cfg.max_iter + 1):
            u, p, _ = self.step_solver.solve(c0, w, rhs)
            delta = self._mass_norm(u - w)
            updates.append(delta)
            if delta <= cfg.rel_tol * self._mass_norm(u) + cfg.abs_tol:
                return u, p, k
            w = u
        raise NonlinearDivergenceError(
            f"Picard iteration did not converge within {cfg.max_iter} iterations "
            f"(last update {updates[-1]:.3e})",
            diagnostics=updates,
        )

    # -- one step of each scheme ------------------------------------------

    def step_euler(self, state: DiscreteState):
        """Backward Euler step from the level stored in ``state``."""
        dt = self.scheme.dt
        t_new = (state.t_index + 1) * dt
        c0 = 1.0 / dt
        rhs = self._external_load(t_new) + c0 * (self.ops.M @ state.u)
        u, p, iters = self._picard(c0, rhs, state.u)
        return DiscreteState(
            u=u, p=p, t_index=state.t_index + 1, history=(state.u,) + state.history[:1]
        ), iters

    def step_bdf2_implicit(self, state: DiscreteState):
        if not state.history:
            raise ValueError(
                "BDF2 step requires two previous levels; take the first step with step_euler"
            )
        dt = self.scheme.dt
        t_new = (state.t_index + 1) * dt
        c0 = 1.5 / dt
        rhs = self._external_load(t_new) + self.ops.M @ (
            (2.0 * state.u - 0.5 * state.history[0]) / dt
        )
        u, p, iters = self._picard(c0, rhs, state.u)
        return DiscreteState(
            u=u, p=p, t_index=state.t_index + 1, history=(state.u,) + state.history[:1]
        ), iters

    def step_bdf2_semi(self, state: DiscreteState):
        """Single linear solve with convection frozen at 2*u(n-1) - u(n-2)."""
        if not state.history:
            raise ValueError(
                "semi-implicit BDF2 step requires two previous levels; "
                "the driver takes the first step with the d_t^1 difference"
            )
        dt = self.scheme.dt
        t_new = (state.t_index + 1) * dt
        c0 = 1.5 / dt
        w = 2.0 * state.u - state.history[0]
        rhs = self._external_load(t_new) + self.ops.M @ (
            (2.0 * state.u - 0.5 * state.history[0]) / dt
        )
        u, p, _ = self.step_solver.solve(c0, w, rhs)
        return DiscreteState(
            u=u, p=p, t_index=state.t_index + 1, history=(state.u,) + state.history[:1]
        ), 1

    def _step_semi_startup(self, state: DiscreteState):
        # first-difference step with convection frozen at the initial velocity
        dt = self.scheme.dt
        c0 = 1.0 / dt
        rhs = self._external_load(dt) + c0 * (self.ops.M @ state.u)
        u, p, _ = self.step_solver.solve(c0, state.u, rhs)
        return DiscreteState(u=u, p=p, t_index=1, history=(state.u,)), 1

    def step(self, state: DiscreteState):
        """Advance one level, dispatching on scheme and startup rule."""
        scheme = self.scheme.scheme
        if scheme == "euler_implicit":
            return self.step_euler(state)
        if scheme == "bdf2_implicit":
            if state.t_index == 0:
                return self.step_euler(state)
            return self.step_bdf2_implicit(state)
        if state.t_index == 0:
            return self._step_semi_startup(state)
        return self.step_bdf2_semi(state)

    # -- driving -----------------------------------------------------------

    def initial_state(self, initial_data: str = "zero") -> DiscreteState:
        return project_initial_data(self.space, initial_data, 0.0, self.solution)

    def record_level(self, state: DiscreteState, record: RunRecord, iters: int = 0) -> None:
        t = state.t_index * self.scheme.dt
        err = l2_error_against_analytic(
            self.space, state.u, self.solution.velocity, t, relative=True
        )
        div = float(np.linalg.norm(self.ops.D @ state.u))
        record.append(t, err, div, iters)

    def advance(self, state: DiscreteState, record: RunRecord, num_steps: int) -> DiscreteState:
        """Take ``num_steps`` steps, appending diagnostics after each one."""
        start = time.perf_counter()
        try:
            for _ in range(num_steps):
                state, iters = self.step(state)
                self.record_level(state, record, iters)
        finally:
            record.wall_time += time.perf_counter() - start
        return state


def _warn_dt_restrictions(scheme: SchemeConfig, ops: OperatorSet, nudge) -> None:
    # advisory only: the BDF2 analyses assume dt below a gamma-dependent
    # bound, the Euler analysis needs none
    if scheme.scheme == "euler_implicit" or nudge is None or nudge.beta <= 0.0:
        return
    from .diagnostics import compute_gamma

    gamma = compute_gamma(ops.nu, nudge.observer.partition.H, nudge.beta, 1.0)
    bound = (24.0 if scheme.scheme == "bdf2_implicit" else 12.0) / gamma
    if scheme.dt > bound:
        warnings.warn(
            f"time step {scheme.dt:g} exceeds the advisory bound {bound:g} "
            f"for {scheme.scheme} (decay rate gamma={gamma:g}); running anyway",
            RuntimeWarning,
            stacklevel=3,
        )


def run(
    ops: OperatorSet,
    scheme: SchemeConfig,
    solution: ManufacturedSolution | None = None,
    nudge: NudgingMatrixSpec | None = None,
    solver: SolverSettings | None = None,
    initial_data: str = "zero",
    step_solver=None,
) -> RunRecord:
    """Advance from t=0 to T, recording the relative velocity error per step.

    On a step failure the raised exception carries the partial record in its
    ``partial_record`` attribute.
    """
    stepper = Stepper(
        ops, scheme, solution=solution, nudge=nudge, solver=solver, step_solver=step_solver
    )
    _warn_dt_restrictions(scheme, ops, stepper.nudge)
    state = stepper.initial_state(initial_data)
    record = RunRecord()
    stepper.record_level(state, record, 0)
    try:
        stepper.advance(state, record, scheme.num_steps)
    except Exception as exc:
        exc.partial_record = record
        raise
    return record
