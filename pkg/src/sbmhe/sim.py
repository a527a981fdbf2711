"""Closed-loop simulation: generate data, run the estimator, score it."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .mhe import EstimatorConfig, init_estimator, step
from .model import GapSequence, NonlinearSystem, SamplingSchedule

__all__ = [
    "SimulationDivergence",
    "ScheduleSpec",
    "Scenario",
    "Trajectory",
    "ExperimentResult",
    "EstimatorRun",
    "SweepRow",
    "make_rng",
    "draw_disturbances",
    "simulate",
    "run_estimator",
    "run_experiment",
    "rmse",
    "sweep_schedules",
]


class SimulationDivergence(RuntimeError):
    def __init__(self, t: int, message: str = ""):
        super().__init__(f"non-finite state at step {t}" + (f": {message}" if message else ""))
        self.t = t


def make_rng(seed: int) -> np.random.Generator:
    """Philox-4x64 counter-based generator; streams depend only on the seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def draw_disturbances(bounds, T_sim: int, seed: int) -> np.ndarray:
    """I.i.d. uniform draws on ``[-bound_i, bound_i]``, one row per ``t = 0 .. T_sim``."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1)
    if np.any(bounds < 0):
        raise ValueError("disturbance bounds must be nonnegative")
    u = make_rng(seed).random((T_sim + 1, bounds.size))
    return (2.0 * u - 1.0) * bounds


@dataclass(frozen=True)
class ScheduleSpec:
    """Either a gap pattern with offset (generating ``K_offset``) or explicit times."""

    gaps: Optional[GapSequence] = None
    offset: int = 1
    times: Optional[tuple] = None
    label: str = ""

    def __post_init__(self):
        if (self.gaps is None) == (self.times is None):
            raise ValueError("give exactly one of gaps or times")
        if self.offset < 1:
            raise ValueError("offset must be >= 1")

    def realize(self, T_sim: int) -> SamplingSchedule:
        if self.gaps is not None:
            return SamplingSchedule.from_gaps(self.gaps, self.offset, T_sim)
        return SamplingSchedule(tuple(t for t in self.times if t <= T_sim))

    @property
    def mean_gap(self) -> float:
        if self.gaps is not None:
            return self.gaps.mean_gap
        times = np.asarray(self.times)
        return float(np.mean(np.diff(np.concatenate([[0], times])))) if times.size else float("inf")


@dataclass(frozen=True, eq=False)
class Scenario:
    system: NonlinearSystem
    schedule: ScheduleSpec
    x0: np.ndarray
    x_hat0: np.ndarray
    T_sim: int
    config: EstimatorConfig
    disturbance_bounds: np.ndarray
    seed: int = 0
    inputs: Optional[np.ndarray] = None
    label: str = ""

    def __post_init__(self):
        sys = self.system
        if self.T_sim < 1:
            raise ValueError("T_sim must be >= 1")
        object.__setattr__(self, "x0", np.asarray(self.x0, float).reshape(sys.n))
        object.__setattr__(self, "x_hat0", np.asarray(self.x_hat0, float).reshape(sys.n))
        b = np.asarray(self.disturbance_bounds, float).reshape(-1)
        if b.shape != (sys.q,) or np.any(b < 0):
            raise ValueError(f"disturbance_bounds must be {sys.q} nonnegative numbers")
        object.__setattr__(self, "disturbance_bounds", b)
        object.__setattr__(self, "inputs", _input_array(self.inputs, sys.m, self.T_sim))
        self.config.check_dims(sys)

    def with_schedule(self, schedule: ScheduleSpec) -> "Scenario":
        return replace(self, schedule=schedule)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))


def _input_array(inputs, m, T_sim):
    if inputs is None:
        return np.zeros((T_sim + 1, m))
    u = np.asarray(inputs, float).reshape(-1, m) if m else np.zeros((len(inputs), 0))
    if len(u) == T_sim:
        u = np.vstack([u, u[-1:]])
    if len(u) != T_sim + 1:
        raise ValueError(f"inputs must have {T_sim + 1} rows, got {len(u)}")
    return u


@dataclass
class Trajectory:
    """States, inputs, disturbances and outputs for ``t = 0 .. T_sim``.

    ``states[t+1] = f(states[t], inputs[t], disturbances[t])`` and
    ``outputs[t] = h(states[t], inputs[t], disturbances[t])``.
    """

    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    outputs: np.ndarray
    available: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states))

    @property
    def T_sim(self) -> int:
        return len(self.states) - 1


def simulate(sys: NonlinearSystem, x0, inputs, disturbances, T_sim: int,
             schedule: Optional[SamplingSchedule] = None) -> Trajectory:
    """Forward recursion of the plant.

    ``inputs`` and ``disturbances`` need ``T_sim`` or ``T_sim + 1`` rows; with
    ``T_sim`` rows the final output uses the last input and zero disturbance.
    """
    U = _input_array(inputs, sys.m, T_sim)
    W = np.asarray(disturbances, float).reshape(-1, sys.q)
    if len(W) == T_sim:
        W = np.vstack([W, np.zeros((1, sys.q))])
    if len(W) != T_sim + 1:
        raise ValueError(f"disturbances must have {T_sim} or {T_sim + 1} rows, got {len(W)}")
    X = np.empty((T_sim + 1, sys.n))
    Y = np.empty((T_sim + 1, sys.p))
    X[0] = np.asarray(x0, float).reshape(sys.n)
    for t in range(T_sim + 1):
        Y[t] = sys.output(X[t], U[t], W[t])
        if t < T_sim:
            X[t + 1] = sys.step(X[t], U[t], W[t])
            if not np.all(np.isfinite(X[t + 1])):
                raise SimulationDivergence(t + 1)
    avail = np.zeros(T_sim + 1, dtype=bool)
    if schedule is not None:
        for t in schedule.times:
            if t <= T_sim:
                avail[t] = True
    return Trajectory(X, U, W, Y, avail)


@dataclass
class EstimatorRun:
    """Per-step output of :func:`run_estimator` for ``t = 0 .. T``."""

    estimates: np.ndarray
    solved: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    solutions: list = field(default_factory=list, repr=False)

    @property
    def solves(self) -> int:
        return int(self.solved.sum())


def run_estimator(sys: NonlinearSystem, config: EstimatorConfig, x_hat0, outputs, available, inputs,
                  keep_solutions: bool = False) -> EstimatorRun:
    """Replay recorded data through the estimator.

    ``outputs[j]`` is handed over at time ``j + 1`` when ``available[j]`` is
    set.  Errors raised at step ``t`` carry ``"step t"`` in their message.
    ``keep_solutions`` stores every window solution (memory heavy for long
    runs).
    """
    available = np.asarray(available, bool)
    outputs = np.asarray(outputs, float).reshape(len(available), sys.p)
    T = len(available) - 1
    U = _input_array(inputs, sys.m, T)
    state = init_estimator(sys, config, x_hat0)
    solutions = []
    for t in range(1, T + 1):
        new = {t - 1: outputs[t - 1]} if available[t - 1] else None
        try:
            step(state, U[t - 1], new)
        except (ValueError, RuntimeError) as exc:
            exc.args = (f"step {t}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        if keep_solutions and state.records[-1].solved:
            solutions.append(state.last_solution)
    rec = state.records
    return EstimatorRun(
        estimates=np.array(state.estimates),
        solved=np.array([r.solved for r in rec]),
        iterations=np.array([r.iterations for r in rec]),
        converged=np.array([r.converged for r in rec]),
        solutions=solutions,
    )


@dataclass
class ExperimentResult:
    trajectory: Trajectory
    estimates: np.ndarray
    solved: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    seed: int
    label: str = ""
    solutions: list = field(default_factory=list, repr=False)

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.trajectory.states - self.estimates, axis=1)

    @property
    def rmse(self) -> float:
        return rmse(self)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def run_experiment(scn: Scenario, keep_solutions: bool = False) -> ExperimentResult:
    """Simulate the scenario and run the estimator over ``t = 0 .. T_sim``.

    Measurements ``y_j`` with ``j`` in the schedule are handed to the
    estimator at time ``j + 1``.
    """
    sys = scn.system
    schedule = scn.schedule.realize(scn.T_sim)
    W = draw_disturbances(scn.disturbance_bounds, scn.T_sim, scn.seed)
    traj = simulate(sys, scn.x0, scn.inputs, W, scn.T_sim, schedule)
    est = run_estimator(sys, scn.config, scn.x_hat0, traj.outputs, traj.available, traj.inputs,
                        keep_solutions=keep_solutions)
    return ExperimentResult(
        trajectory=traj,
        estimates=est.estimates,
        solved=est.solved,
        iterations=est.iterations,
        converged=est.converged,
        seed=scn.seed,
        label=scn.label or scn.schedule.label,
        solutions=est.solutions,
    )


def rmse(result) -> float:
    """Root of the mean (over all steps) squared Euclidean error norm.

    Accepts an :class:`ExperimentResult` or an array of per-step errors
    (norms, or error vectors row-wise).
    """
    if isinstance(result, ExperimentResult):
        e = result.errors
    else:
        e = np.asarray(result, float)
        if e.ndim == 2:
            e = np.linalg.norm(e, axis=1)
    if e.size == 0:
        raise ValueError("empty error series")
    return float(np.sqrt(np.mean(e ** 2)))


@dataclass
class SweepRow:
    label: str
    mean_gap: float
    rmse: list
    converged: bool = True

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def std_rmse(self) -> float:
        return float(np.std(self.rmse, ddof=1)) if len(self.rmse) > 1 else 0.0


_SWEEP_CTX = {}


def _sweep_job(key):
    si, seed = key
    scn = _SWEEP_CTX["scn"].with_schedule(_SWEEP_CTX["schedules"][si]).with_seed(seed)
    res = run_experiment(scn)
    return rmse(res), res.all_converged


def _workers():
    env = os.environ.get("HORIZON_EST_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _mp_methods():
    import multiprocessing as mp
    return mp.get_all_start_methods()


def sweep_schedules(scn: Scenario, schedules: Sequence[ScheduleSpec], seeds: Sequence[int],
                    workers: Optional[int] = None) -> list:
    """Mean RMSE per schedule over the given seeds.

    Replicate ``k`` uses seed ``seeds[k]`` for every schedule, so all
    schedules see the same disturbance realisations.  Jobs run in worker
    processes when more than one worker is allowed (``HORIZON_EST_THREADS``
    caps the count); results do not depend on the worker count.
    """
    if len(schedules) < 1 or len(seeds) < 1:
        raise ValueError("need at least one schedule and one seed")
    keys = [(si, int(s)) for si in range(len(schedules)) for s in seeds]
    _SWEEP_CTX.update(scn=scn, schedules=list(schedules))
    workers = _workers() if workers is None else workers
    try:
        if workers > 1 and len(keys) > 1 and "fork" in _mp_methods():
            import multiprocessing as mp
            with ProcessPoolExecutor(max_workers=min(workers, len(keys)), mp_context=mp.get_context("fork")) as ex:
                out = list(ex.map(_sweep_job, keys))
        else:
            out = [_sweep_job(k) for k in keys]
    finally:
        _SWEEP_CTX.clear()
    rows = []
    for si, spec in enumerate(schedules):
        part = out[si * len(seeds):(si + 1) * len(seeds)]
        rows.append(SweepRow(spec.label or f"schedule{si}", spec.mean_gap, [v for v, _ in part],
                             all(ok for _, ok in part)))
    return rows
