"""Configuration-driven entry points: run, study-time, study-space, check.

Configs are flat ``key=value`` text files ('#' starts a comment), with
``--set KEY=VALUE`` command-line overrides applied afterwards (later
wins).  Durations and steps accept plain floats or fractions such as
``1/160``.  Every CSV/Markdown artifact embeds the fully resolved
configuration as '#' comment header lines; CSVs use '.' decimals, 17
significant digits and LF line endings, and are written atomically.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

import argparse
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .diagnostics import (
    asymptotic_window_max,
    check_conditions,
    default_delta,
    estimate_L,
    fit_slope,
    plateau_reached,
    pre_plateau_points,
)
from .errors import ConvergenceFailureError, NonlinearDivergenceError, SingularSystemError
from .fem_assembly import (
    MixedSpace,
    assemble_constant_operators,
    build_mixed_space,
    interpolate_velocity,
)
from .linsolve import SolverSettings
from .mesh import build_coarse_partition, build_uniform_mesh
from .mms import standard_solution
from .observer import (
    NudgingMatrixSpec,
    build_cell_average_observer,
    build_coarse_lagrange_observer,
)
from .timestepping import PicardSettings, RunRecord, SchemeConfig, Stepper, run

CSV_SCHEMA = 1

OBSERVER_KINDS = ("cell_average", "coarse_lagrange")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


@dataclass
class ExperimentConfig:
    """One fully resolved experiment; defaults mirror the reference setup."""

    nu: float
    mu: float
    n: int
    dt: float
    T: float
    beta: float = 1.0
    ratio: int = 3
    scheme: str = "bdf2_semi_implicit"
    observer_kind: str = "cell_average"
    initial_data: str = "zero"
    window_start: float | None = None
    window_end: float | None = None
    solver_method: str = "sparse_direct"
    solver_rel_tol: float = 1e-10
    solver_max_iter: int = 500
    picard_rel_tol: float = 1e-10
    picard_abs_tol: float = 1e-12
    picard_max_iter: int = 100
    c_I: float = 1.0
    out: str = "."

    def window(self) -> tuple:
        # default: trailing half of the horizon
        a = self.window_start if self.window_start is not None else self.T / 2.0
        b = self.window_end if self.window_end is not None else self.T
        if not (0.0 <= a < b <= self.T + 1e-12):
            raise ConfigError(f"error window [{a}, {b}] is not inside the run horizon")
        return (a, b)

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


_REQUIRED = ("nu", "mu", "n", "dt", "T")
_FLOAT_KEYS = {
    "nu",
    "mu",
    "dt",
    "T",
    "beta",
    "window_start",
    "window_end",
    "solver_rel_tol",
    "picard_rel_tol",
    "picard_abs_tol",
    "c_I",
}
_INT_KEYS = {"n", "ratio", "solver_max_iter", "picard_max_iter"}
_STR_KEYS = {"scheme", "observer_kind", "initial_data", "solver_method", "out"}


def parse_number(text: str) -> float:
    """Parse a float, also accepting simple fractions like 1/160."""
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        return float(num) / float(den)
    return float(text)


def read_config_file(path):
    """Parse a flat key=value file; errors carry line numbers."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def config_from_mapping(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required configuration keys: {', '.join(missing)}")
    kwargs = {}
    for key, value in raw.items():
        try:
            if key in _FLOAT_KEYS:
                kwargs[key] = parse_number(str(value))
            elif key in _INT_KEYS:
                kwargs[key] = int(str(value))
            else:
                kwargs[key] = str(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.nu <= 0.0:
        raise ConfigError("nu must be positive")
    if cfg.mu < 0.0:
        raise ConfigError("mu must be nonnegative")
    if cfg.beta < 0.0:
        raise ConfigError("beta must be nonnegative")
    if cfg.n < 1:
        raise ConfigError("n must be a positive integer")
    if cfg.beta > 0.0 and (cfg.ratio < 1 or cfg.n % cfg.ratio != 0):
        raise ConfigError(f"ratio {cfg.ratio} must divide n {cfg.n}")
    if cfg.dt <= 0.0 or cfg.T < cfg.dt:
        raise ConfigError("need dt > 0 and T >= dt")
    if cfg.observer_kind not in OBSERVER_KINDS:
        raise ConfigError(f"observer_kind must be one of {OBSERVER_KINDS}")
    if cfg.initial_data not in ("zero", "exact_interpolant"):
        raise ConfigError("initial_data must be 'zero' or 'exact_interpolant'")
    try:
        SchemeConfig(scheme=cfg.scheme, dt=cfg.dt, T=cfg.T)
        SolverSettings(method=cfg.solver_method, rel_tol=cfg.solver_rel_tol)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.window()


def load_config(config_path, overrides) -> ExperimentConfig:
    raw = read_config_file(config_path) if config_path else {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    return config_from_mapping(raw)


def config_header_lines(cfg: ExperimentConfig, extra=()):
    lines = [f"schema={CSV_SCHEMA}"]
    lines += [f"{k}={v}" for k, v in cfg.items()]
    lines += list(extra)
    return lines


def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- experiment assembly ----------------------------------------------------


def build_problem(cfg: ExperimentConfig):
    """Mesh, space, observer and operators for one configuration."""
    mesh = build_uniform_mesh(cfg.n)
    space = build_mixed_space(mesh)
    nudge = None
    if cfg.beta > 0.0:
        partition = build_coarse_partition(mesh, cfg.ratio)
        if cfg.observer_kind == "cell_average":
            observer = build_cell_average_observer(partition, space)
        else:
            observer = build_coarse_lagrange_observer(partition, space)
        nudge = NudgingMatrixSpec(beta=cfg.beta, observer=observer)
    ops = assemble_constant_operators(mesh, space, nu=cfg.nu, mu=cfg.mu, nudge=nudge)
    return ops, nudge


def scheme_config(cfg: ExperimentConfig) -> SchemeConfig:
    return SchemeConfig(
        scheme=cfg.scheme,
        dt=cfg.dt,
        T=cfg.T,
        picard=PicardSettings(
            rel_tol=cfg.picard_rel_tol,
            abs_tol=cfg.picard_abs_tol,
            max_iter=cfg.picard_max_iter,
        ),
    )


def solver_settings(cfg: ExperimentConfig) -> SolverSettings:
    return SolverSettings(
        method=cfg.solver_method,
        rel_tol=cfg.solver_rel_tol,
        max_iter=cfg.solver_max_iter,
    )


@dataclass
class RunSummary:
    config: ExperimentConfig
    record: RunRecord
    window: tuple
    window_max_error: float
    report: object  # TheoryReport

    def line(self) -> str:
        checks = " ".join(f"{k}={str(v).lower()}" for k, v in self.report.checks.items())
        return (
            f"window=[{self.window[0]:g},{self.window[1]:g}] "
            f"max_rel_err={self.window_max_error:.6e} gamma={self.report.gamma:.6e} "
            f"L={self.report.L_estimate:.6e} {checks}"
        )


def theory_report(cfg: ExperimentConfig, ops, reference_history=None):
    if reference_history is None:
        # sample the exact solution's interpolant over one period
        sol = standard_solution()
        times = np.linspace(0.0, sol.period, 8)
        reference_history = [
            interpolate_velocity(ops.space, sol.velocity, t) for t in times
        ]
    L = estimate_L(reference_history, cfg.mu, cfg.nu, ops.space)
    H = cfg.ratio / cfg.n
    return check_conditions(
        cfg.nu,
        cfg.mu,
        cfg.beta if cfg.beta > 0.0 else 0.0,
        H,
        cfg.dt,
        L,
        c_I=cfg.c_I,
        delta=default_delta(cfg.mu),
    )


def execute_run(cfg: ExperimentConfig) -> RunSummary:
    """Run one configuration and evaluate its window and theory report."""
    ops, nudge = build_problem(cfg)
    record = run(
        ops,
        scheme_config(cfg),
        nudge=nudge,
        solver=solver_settings(cfg),
        initial_data=cfg.initial_data,
    )
    window = cfg.window()
    return RunSummary(
        config=cfg,
        record=record,
        window=window,
        window_max_error=asymptotic_window_max(record, window),
        report=theory_report(cfg, ops),
    )


def run_until_plateau(
    cfg: ExperimentConfig,
    window_length: float = 4.0,
    rel_tol: float = 0.05,
    t_cap: float = 120.0,
):
    """Advance a run in chunks until the trailing window max stabilizes.

    Returns (record, plateau_window); used for configurations whose decay
    time is not known a priori (very small viscosities).
    """
    ops, nudge = build_problem(cfg)
    scheme = scheme_config(cfg)
    stepper = Stepper(ops, scheme, nudge=nudge, solver=solver_settings(cfg))
    state = stepper.initial_state(cfg.initial_data)
    record = RunRecord()
    stepper.record_level(state, record, 0)

    chunk_steps = max(1, int(round(cfg.T / cfg.dt)))
    while True:
        state = stepper.advance(state, record, chunk_steps)
        t_end = record.times[-1]
        if plateau_reached(record, window_length, rel_tol):
            break
        if t_end >= t_cap:
            break
    t_end = record.times[-1]
    return record, (t_end - window_length, t_end)


def _csv_path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def write_run_csv(summary: RunSummary, name="run.csv"):
    cfg = summary.config
    header = config_header_lines(cfg, extra=[f"summary {summary.line()}"])
    import io

    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    buf.write("t,rel_err_vel,div_norm,picard_iters\n")
    rec = summary.record
    for t, e, d, k in zip(rec.times, rec.rel_vel_errors, rec.div_norms, rec.picard_iters):
        buf.write(f"{t:.17g},{e:.17g},{d:.17g},{k}\n")
    path = _csv_path(cfg, name)
    atomic_write_text(path, buf.getvalue())
    return path


# -- subcommands -------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg = replace(cfg, out=args.out)
    summary = execute_run(cfg)
    path = write_run_csv(summary)
    print(f"run: {summary.line()}")
    print(f"csv: {path}")
    return 0


def _study_worker(cfg: ExperimentConfig) -> RunSummary:
    return execute_run(cfg)


def _run_members(members, jobs: int):
    if jobs <= 1 or len(members) == 1:
        return [_study_worker(m) for m in members]
    with ProcessPoolExecutor(max_workers=min(jobs, len(members))) as pool:
        return list(pool.map(_study_worker, members))


def _study_markdown(title, cfg, rows, fit, param_name):
    lines = [f"# {title}", ""]
    lines += [f"<!-- {line} -->" for line in config_header_lines(cfg)]
    lines += ["", f"| {param_name} | window max rel. error |", "| --- | --- |"]
    lines += [f"| {x:.10g} | {e:.10e} |" for x, e in rows]
    lines += ["", f"Least-squares slope (pre-plateau points): **{fit.slope:.4f}**"]
    lines.append(f"Fitted points: {[f'{x:.6g}' for x, _ in fit.points]}")
    lines.append("")
    return "\n".join(lines)


def cmd_study_time(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg = replace(cfg, out=args.out)
    dts = [parse_number(tok) for tok in args.dts.split(",") if tok.strip()]
    if len(dts) < 2:
        raise ConfigError("study-time needs at least two dt values")
    if len(set(dts)) != len(dts):
        raise ConfigError("study-time dt values must be distinct")
    members = [replace(cfg, dt=dt) for dt in sorted(dts, reverse=True)]
    rows, failure = [], None
    try:
        summaries = _run_members(members, args.jobs)
        for member, summary in zip(members, summaries):
            rows.append((member.dt, summary.window_max_error))
            write_run_csv(summary, name=f"run_dt_{member.dt:.10g}.csv")
    except (SingularSystemError, ConvergenceFailureError, NonlinearDivergenceError) as exc:
        failure = exc
    if len(rows) >= 2:
        fit = fit_slope(pre_plateau_points(rows))
        md = _study_markdown("Temporal convergence study", cfg, rows, fit, "dt")
        atomic_write_text(_csv_path(cfg, "study_time.md"), md)
        print(f"study-time: slope={fit.slope:.4f} over {len(fit.points)} pre-plateau points")
    if failure is not None:
        print(f"study-time aborted: {failure}", file=sys.stderr)
        return 2
    return 0


def cmd_study_space(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg = replace(cfg, out=args.out)
    ns = [int(tok) for tok in args.ns.split(",") if tok.strip()]
    if len(ns) < 2:
        raise ConfigError("study-space needs at least two mesh levels")
    if len(set(ns)) != len(ns):
        raise ConfigError("study-space mesh levels must be distinct")
    for n in ns:
        if n % cfg.ratio != 0:
            raise ConfigError(f"ratio {cfg.ratio} does not divide mesh level {n}")
    members = [replace(cfg, n=n) for n in sorted(ns)]
    rows, failure = [], None
    try:
        summaries = _run_members(members, args.jobs)
        for member, summary in zip(members, summaries):
            rows.append((1.0 / member.n, summary.window_max_error))
            write_run_csv(summary, name=f"run_n_{member.n}.csv")
    except (SingularSystemError, ConvergenceFailureError, NonlinearDivergenceError) as exc:
        failure = exc
    if len(rows) >= 2:
        # coarse-to-fine ordering for the plateau filter means descending h
        rows_desc = sorted(rows, key=lambda r: -r[0])
        fit = fit_slope(pre_plateau_points(rows_desc))
        md = _study_markdown("Spatial convergence study", cfg, rows_desc, fit, "h")
        atomic_write_text(_csv_path(cfg, "study_space.md"), md)
        print(f"study-space: slope={fit.slope:.4f} over {len(fit.points)} pre-plateau points")
    if failure is not None:
        print(f"study-space aborted: {failure}", file=sys.stderr)
        return 2
    return 0


def cmd_check(args) -> int:
    cfg = load_config(args.config, args.set)
    ops, _ = build_problem(cfg)
    if args.reference == "zero":
        history = [np.zeros(ops.space.n_vel)]
    else:
        history = None  # exact-solution interpolants over one period
    report = theory_report(cfg, ops, reference_history=history)
    print(report.as_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nudgefem",
        description="Nudged incompressible Navier-Stokes experiments on the unit square",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override a configuration key (repeatable, later wins)",
        )
        p.add_argument("--out", help="output directory (default from config)")
        p.add_argument(
            "--jobs",
            type=int,
            default=os.cpu_count() or 1,
            help="worker processes for study members",
        )

    p_run = sub.add_parser("run", help="single run, per-step CSV plus summary line")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_time = sub.add_parser("study-time", help="sweep dt, fit pre-plateau slope")
    common(p_time)
    p_time.add_argument("--dts", required=True, help="comma-separated dt list, fractions allowed")
    p_time.set_defaults(func=cmd_study_time)

    p_space = sub.add_parser("study-space", help="sweep mesh levels at fixed dt")
    common(p_space)
    p_space.add_argument("--ns", required=True, help="comma-separated subdivision counts")
    p_space.set_defaults(func=cmd_study_space)

    p_check = sub.add_parser("check", help="evaluate the advisory theory conditions")
    common(p_check)
    p_check.add_argument(
        "--reference",
        choices=("exact", "zero"),
        default="exact",
        help="field used to estimate L",
    )
    p_check.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (SingularSystemError, ConvergenceFailureError, NonlinearDivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
