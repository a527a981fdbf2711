"""Command-line front end.

Exit codes: 0 success, 1 negative detectability verdict, 2 invalid
configuration or dimensions, 3 model-domain error or divergent plant,
4 I/O error, 5 solver did not converge (partial results are still written).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .config import ConfigError, load_config
from .detectability import numerical_rank, rolling_window_check, sampled_obs_matrix, unstable_check
from .lm import DivergenceError
from .mhe import UnsatisfiableHorizonError, horizon_factor, min_horizon
from .model import GapSequence, ModelDomainError, k_set_times
from .sim import SimulationDivergence, draw_disturbances, run_estimator, simulate, sweep_schedules
from .svg import Series, line_chart, write_svg

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_DOMAIN, EXIT_IO, EXIT_NONCONV = 0, 1, 2, 3, 4, 5


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _out_dir(args, cfg=None) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif cfg is not None and cfg.output_dir is not None:
        out = cfg.output_dir
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _plot_on(args, cfg) -> bool:
    return not args.no_plot and cfg.plot


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scn = cfg.scenario(seed=_seed(args, cfg))
    W = draw_disturbances(scn.disturbance_bounds, scn.T_sim, scn.seed)
    traj = simulate(scn.system, scn.x0, scn.inputs, W, scn.T_sim, scn.schedule.realize(scn.T_sim))
    out = _out_dir(args, cfg)
    path = out / "trajectory.csv"
    fio.write_trajectory_csv(path, traj)
    print(f"wrote {path} ({traj.T_sim + 1} rows, {int(traj.available.sum())} measurements)")
    if _plot_on(args, cfg):
        data = fio.read_trajectory_csv(path)
        series = [Series(f"x_{i + 1}", data.times, data.states[:, i]) for i in range(data.states.shape[1])]
        series += [Series(f"y_{i + 1}", data.times, data.outputs[:, i]) for i in range(data.outputs.shape[1])]
        write_svg(out / "trajectory.svg", line_chart(series, "Simulated trajectory", "t", "value"))
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    system = cfg.system()
    est_cfg = cfg.estimator(system)
    data = fio.read_trajectory_csv(args.measurements)
    if data.outputs.shape[1] != system.p:
        raise ConfigError(f"measurements have {data.outputs.shape[1]} output columns, system has p={system.p}")
    if data.states is not None and data.states.shape[1] != system.n:
        raise ConfigError(f"measurements have {data.states.shape[1]} state columns, system has n={system.n}")
    if data.inputs is not None:
        if data.inputs.shape[1] != system.m:
            raise ConfigError(f"measurements have {data.inputs.shape[1]} input columns, system has m={system.m}")
        U = data.inputs
    else:
        U = cfg.inputs(system, data.T_sim)
    x_hat0 = np.asarray(cfg.raw["x_hat0"], float)
    if x_hat0.shape != (system.n,):
        raise ConfigError(f"x_hat0: expected {system.n} entries")
    run = run_estimator(system, est_cfg, x_hat0, data.outputs, data.available, U)
    out = _out_dir(args, cfg)
    path = out / "result.csv"
    fio.write_result_csv(path, run.estimates, run.solved, run.converged, truth=data.states)
    steps = len(run.solved) - 1
    print(f"wrote {path}")
    print(f"solves: {run.solves}  open-loop steps: {steps - run.solves}")
    if data.states is not None:
        err = np.linalg.norm(data.states - run.estimates, axis=1)
        print(f"final err_norm: {err[-1]:.6g}  rmse: {float(np.sqrt(np.mean(err ** 2))):.6g}")
    if _plot_on(args, cfg):
        series = [Series(f"x_hat_{i + 1}", data.times, run.estimates[:, i]) for i in range(system.n)]
        if data.states is not None:
            series += [Series(f"x_{i + 1}", data.times, data.states[:, i]) for i in range(system.n)]
        write_svg(out / "estimate.svg", line_chart(series, "Estimates", "t", "value"))
    bad = int(np.sum(run.solved & ~run.converged))
    if bad:
        _err(f"{bad} window problem(s) did not converge")
        return EXIT_NONCONV
    return EXIT_OK


def cmd_observability(args) -> int:
    A, C = fio.read_matrix_csv(args.matrices)
    gaps = GapSequence(tuple(args.pattern))
    T = args.T
    if T < gaps.d_max:
        raise ConfigError(f"T={T} is smaller than the largest gap {gaps.d_max}")
    n = A.shape[0]
    # first rolling window: K_1 samples in [0, T]
    taus = [t for t in k_set_times(gaps, 1, T + 1) if t <= T]
    if args.times:
        taus = sorted(set(args.times))
    O = sampled_obs_matrix(A, C, taus)
    rank = numerical_rank(O, args.rank_tol)
    print(f"sample times: {' '.join(map(str, taus))}")
    print(f"sampled observability rank: {rank} of {n}")
    full = rolling_window_check(A, C, gaps, T, args.rank_tol)
    print(f"rolling-window observability (full state): {'yes' if full else 'no'}")
    verdict = unstable_check(A, C, gaps, T, args.rank_tol, args.circle_tol)
    print(verdict.summary())
    return EXIT_OK if verdict.detectable else EXIT_VERDICT


def cmd_design_horizon(args) -> int:
    cert = fio.load_certificate(args.cert)
    if args.d_max < 0:
        raise ConfigError("d_max must be nonnegative")
    M = min_horizon(cert, args.d_max)
    print(f"M={M}")
    print(f"4*lambda_max(P2,P1)^2*eta^M={horizon_factor(cert, M):.12g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    schedules = cfg.sweep_schedules()
    base = _seed(args, cfg)
    scn = cfg.scenario(seed=base)
    seeds = cfg.sweep_seeds(None if args.seed is None else args.seed)
    rows = sweep_schedules(scn, schedules, seeds)
    out = _out_dir(args, cfg)
    path = out / "sweep.csv"
    fio.write_sweep_csv(path, rows)
    print(f"wrote {path}")
    for r in rows:
        print(f"{r.label:>20s}  mean gap {r.mean_gap:8.3f}  RMSE {r.mean_rmse:.6f} +/- {r.std_rmse:.6f}")
    if _plot_on(args, cfg):
        import csv
        with open(path, newline="") as fh:
            table = list(csv.DictReader(fh))
        gap = [float(r["mean_gap"]) for r in table]
        val = [float(r["mean_rmse"]) for r in table]
        order = np.argsort(gap, kind="stable")
        write_svg(out / "sweep.svg", line_chart(
            [Series("mean RMSE", np.take(gap, order), np.take(val, order), markers=True)],
            "RMSE against average sampling gap", "average gap (steps)", "RMSE"))
    if not all(r.converged for r in rows):
        _err("some window problems did not converge")
        return EXIT_NONCONV
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbmhe", description="Sample-based moving horizon estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory (default: config output_dir or .)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--no-plot", action="store_true", help="skip SVG output")

    p = sub.add_parser("simulate", help="simulate a scenario and write trajectory.csv")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="replay a trajectory CSV through the estimator")
    common(p)
    p.add_argument("--measurements", required=True, help="trajectory CSV (t, available, y_*, [u_*], [x_*])")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("observability", help="sample-based observability and detectability checks")
    p.add_argument("--matrices", required=True, help="CSV: 'n,p' line, then rows of A and of C")
    p.add_argument("--pattern", type=int, nargs="+", required=True, help="gap pattern d_1 .. d_k")
    p.add_argument("--T", type=int, required=True, help="rolling window length")
    p.add_argument("--times", type=int, nargs="+", default=None, help="explicit sample times for the rank line")
    p.add_argument("--rank-tol", type=float, default=1e4)
    p.add_argument("--circle-tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("design-horizon", help="smallest admissible horizon for a certificate")
    p.add_argument("--cert", required=True, help="JSON with P1, P2, Q, R, eta")
    p.add_argument("--d-max", type=int, required=True, help="largest sampling gap")
    p.set_defaults(func=cmd_design_horizon)

    p = sub.add_parser("sweep", help="mean RMSE over schedules and seeds")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ModelDomainError as exc:
        _err(f"model domain: {exc}")
        return EXIT_DOMAIN
    except SimulationDivergence as exc:
        _err(str(exc))
        return EXIT_DOMAIN
    except DivergenceError as exc:
        _err(f"solver: {exc}")
        return EXIT_NONCONV
    except (ConfigError, UnsatisfiableHorizonError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O: {exc}")
        return EXIT_IO
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
