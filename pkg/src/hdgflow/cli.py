"""Run orchestration and the command-line entry point.

Verbs: `run <config>` advances a single simulation and writes its artifact
directory, `study <kind> <config>` drives the convergence / robustness /
cost sweeps, `validate <config>` parses and echoes the effective settings.
The output root can be redirected with HDGFLOW_OUTPUT_ROOT.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from .mesh import build_square_mesh
from .fespace import make_space, l2_error
from .forms import FormParams
from .solver import SolveLog, SolverError
from . import timeloop
from . import cases
from .config import ConfigError, echo_config
from .vtkio import write_vtu

TABLEAU_BY_DEGREE = {1: "imex_euler", 2: "ssp2_332", 3: "ssp3_433"}
DEFAULT_GRIDS = {1: [8, 16, 32, 64], 2: [8, 16, 32], 3: [8, 16]}


def _output_dir(cfg):
    root = os.environ.get("HDGFLOW_OUTPUT_ROOT", "")
    return os.path.join(root, cfg.output.dir) if root else cfg.output.dir


def _build_case(cfg):
    if cfg.testcase == "taylor_green":
        return cases.taylor_green(cfg.kappa)
    return cases.shear_flow(rho=cfg.rho, delta=cfg.delta)


def _tracer_ic(cfg, case):
    if cfg.tracer.ic == "gaussian":
        s = case.L  # scale the blob with the domain
        return lambda x, y: np.exp(
            -50.0 * (((x / s - 0.5) ** 2) + ((y / s - 0.75) ** 2))
        )
    return lambda x, y: np.sin(2 * np.pi * x / case.L)


def run(cfg):
    """Execute one configured simulation; returns the output directory."""
    case = _build_case(cfg)
    outdir = _output_dir(cfg)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.toml"), "w") as fh:
        fh.write(echo_config(cfg))

    mesh = build_square_mesh(cfg.n, case.L, periodic=case.periodic)
    V_Q = make_space(mesh, "dg_vector", cfg.k + 1)
    V_p = make_space(mesh, "dg_scalar", cfg.k)
    V_tr = make_space(mesh, "trace", cfg.k)
    params = FormParams(alpha=cfg.alpha, tau=cfg.tau, delta_up=cfg.delta_up)
    forcing = getattr(case, "forcing", None)
    exact_Q = getattr(case, "exact_Q", None)
    exact_p = getattr(case, "exact_p", None)

    log = SolveLog()
    stepper = timeloop.Stepper(
        V_Q, V_p, V_tr, timeloop.tableau(cfg.tableau), cfg.dt,
        params=params, forcing=forcing, n_richardson=cfg.n_R,
        pressure_rtol=cfg.solver.pressure_rtol,
        velocity_rtol=cfg.solver.velocity_rtol,
        maxit=cfg.solver.maxit, smooth_steps=cfg.solver.mg.smooth_steps,
        log=log,
    )
    q0 = _tracer_ic(cfg, case) if cfg.tracer.enabled else None
    state = timeloop.initial_flow_state(
        V_Q, V_p, V_tr, case.Q0, f=forcing, tau=cfg.tau,
        q0=q0, tracer_degree=cfg.tracer.degree,
    )

    ts_rows = [_timeseries_row(stepper, state, 0, 0.0)]
    err_rows = []
    if exact_Q is not None:
        err_rows.append(_error_row(state, case, 0))
    _maybe_snapshot(cfg, state, mesh, outdir, 0, exact_Q, exact_p)

    t0 = time.perf_counter()
    for i in range(cfg.n_t):
        try:
            state = stepper.step(state, i)
        except SolverError as exc:
            _flush(cfg, outdir, ts_rows, err_rows, log)
            raise SolverError(f"step {i + 1} failed: {exc}") from exc
        ts_rows.append(_timeseries_row(stepper, state, i + 1,
                                       time.perf_counter() - t0))
        if exact_Q is not None:
            err_rows.append(_error_row(state, case, i + 1))
        _maybe_snapshot(cfg, state, mesh, outdir, i + 1, exact_Q, exact_p)

    _flush(cfg, outdir, ts_rows, err_rows, log)
    return outdir


def _timeseries_row(stepper, state, step, seconds):
    if stepper.last_final is not None:
        # constraint residual of the velocity update (the stepper invariant);
        # the reconstructed (p, lam) satisfy their own source, not Gamma = 0
        div = float(np.linalg.norm(
            stepper.constraint_residual(*stepper.last_final)
        ))
    else:
        div = cases.divergence_norm(state.Q, state.p, state.lam,
                                    blocks=stepper.blocks)
    return [step, "%.12e" % state.t, "%.12e" % cases.energy(state.Q),
            "%.12e" % div, "%.6e" % seconds]


def _error_row(state, case, step):
    return [step, "%.12e" % state.t,
            "%.12e" % l2_error(state.Q, case.exact_Q, t=state.t),
            "%.12e" % l2_error(state.p, case.exact_p, t=state.t)]


def _maybe_snapshot(cfg, state, mesh, outdir, step, exact_Q, exact_p):
    every = cfg.output.vtu_every
    if every > 0 and (step % every == 0 or step == cfg.n_t):
        path = os.path.join(outdir, "snapshot_%06d.vtu" % step)
        write_vtu(state, mesh, path, exact_Q=exact_Q, exact_p=exact_p)


def _flush(cfg, outdir, ts_rows, err_rows, log):
    if not cfg.output.csv:
        return
    with open(os.path.join(outdir, "timeseries.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "energy", "div_residual", "total_seconds"])
        w.writerows(ts_rows)
    if err_rows:
        with open(os.path.join(outdir, "errors.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "err_Q_L2", "err_p_L2"])
            w.writerows(err_rows)
    log.write(os.path.join(outdir, "solvelog.csv"))


# -- studies -------------------------------------------------------------------------


def _study_matrix(study, kind):
    ks = study.get("ks", [1, 2, 3])
    if kind == "convergence":
        grids = {k: study.get("ns", DEFAULT_GRIDS[k]) for k in ks}
    else:
        grids = {k: study.get("ns", [16, 32, 64]) for k in ks}
    tabs = study.get("tableaus", [TABLEAU_BY_DEGREE[k] for k in ks])
    return ks, grids, dict(zip(ks, tabs))


def study(kind, cfg, study_opts=None):
    """Aggregated sweeps; returns the path of the CSV written."""
    study_opts = study_opts or {}
    outdir = _output_dir(cfg)
    os.makedirs(outdir, exist_ok=True)
    ks, grids, tabs = _study_matrix(study_opts, kind)
    if kind == "convergence":
        path = os.path.join(outdir, "convergence.csv")
        # per-degree sweep counts unless the study table pins one
        cases.run_convergence_study(
            ks, grids, tabs, kappa=cfg.kappa, T=cfg.T, path=path,
            n_richardson=study_opts.get("n_R"),
        )
        return path
    if kind == "robustness":
        return _robustness_study(cfg, ks, grids, tabs, outdir,
                                 n_steps=study_opts.get("n_steps", 3))
    if kind == "cost":
        return _cost_study(cfg, ks, grids, tabs, outdir,
                           n_steps=study_opts.get("n_steps", 3))
    raise ConfigError(f"unknown study kind '{kind}'")


def _short_run(cfg, case, k, n, tab_name, n_steps):
    mesh = build_square_mesh(n, case.L, periodic=case.periodic)
    V_Q = make_space(mesh, "dg_vector", k + 1)
    V_p = make_space(mesh, "dg_scalar", k)
    V_tr = make_space(mesh, "trace", k)
    log = SolveLog()
    forcing = getattr(case, "forcing", None)
    stepper = timeloop.Stepper(
        V_Q, V_p, V_tr, timeloop.tableau(tab_name), cfg.T / n,
        forcing=forcing, n_richardson=cfg.n_R, log=log,
    )
    state = timeloop.initial_flow_state(V_Q, V_p, V_tr, case.Q0, f=forcing)
    t0 = time.perf_counter()
    for i in range(n_steps):
        state = stepper.step(state, i)
    seconds = time.perf_counter() - t0
    return log, seconds / n_steps, V_Q.total_dofs + V_p.total_dofs


def _robustness_study(cfg, ks, grids, tabs, outdir, n_steps):
    case = _build_case(cfg)
    path = os.path.join(outdir, "robustness.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "n", "kind", "mean_iterations"])
        for k in ks:
            for n in grids[k]:
                try:
                    log, _, _ = _short_run(cfg, case, k, n, tabs[k], n_steps)
                except SolverError as exc:
                    w.writerow([k, n, "failed", f"nan ({exc})"])
                    continue
                for kind in ("tentative", "pressure", "final"):
                    w.writerow([k, n, kind, "%.3f" % log.mean_iterations(kind)])
    return path


def _cost_study(cfg, ks, grids, tabs, outdir, n_steps):
    case = _build_case(cfg)
    path = os.path.join(outdir, "cost.csv")
    rows = []
    for k in ks:
        for n in grids[k]:
            try:
                _, per_step, N = _short_run(cfg, case, k, n, tabs[k], n_steps)
                rows.append([k, n, N, "%.6e" % per_step])
            except SolverError as exc:
                rows.append([k, n, -1, f"nan ({exc})"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "n", "N", "seconds_per_step"])
        w.writerows(rows)
    return path


def fit_cost_slope(path):
    """Log-log slope of seconds-per-step vs N; nan for a single row."""
    N, t = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if not row["seconds_per_step"].startswith("nan"):
                N.append(float(row["N"]))
                t.append(float(row["seconds_per_step"]))
    if len(N) < 2:
        return float("nan")
    return float(np.polyfit(np.log(N), np.log(t), 1)[0])


# -- entry point ----------------------------------------------------------------------


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="hdgflow",
        description="Hybridised incompressible-flow solver driver",
    )
    sub = ap.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="advance one configured simulation")
    p_run.add_argument("config")
    p_study = sub.add_parser("study", help="parameter sweeps")
    p_study.add_argument("kind", choices=["convergence", "robustness", "cost"])
    p_study.add_argument("config")
    p_val = sub.add_parser("validate", help="parse a config and echo it")
    p_val.add_argument("config")
    args = ap.parse_args(argv)

    try:
        if args.verb == "validate":
            cfg, _ = _parse_with_study(args.config)
            sys.stdout.write(echo_config(cfg))
            return 0
        if args.verb == "run":
            cfg, _ = _parse_with_study(args.config)
            outdir = run(cfg)
            print(f"run complete: {outdir}")
            return 0
        cfg, study_opts = _parse_with_study(args.config)
        path = study(args.kind, cfg, study_opts)
        print(f"study complete: {path}")
        if args.kind == "cost":
            slope = fit_cost_slope(path)
            if np.isfinite(slope):
                print(f"fitted cost slope: {slope:.3f}")
        return 0
    except (ConfigError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _parse_with_study(source):
    """Split an optional [study] table off before SimConfig validation."""
    from .config import load_table, from_table

    table = load_table(source)
    study_opts = table.pop("study", {})
    return from_table(table), study_opts


if __name__ == "__main__":
    sys.exit(main())
