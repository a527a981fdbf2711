"""Sample-based moving horizon estimation.

At time ``t`` the estimator looks back over the window ``[t - M_t, t - 1]``
with ``M_t = min(t, M + delta_t)`` and minimises

    2 eta^M_t |x_s - prior|^2_P2
      + sum_j 2 eta^(t-j-1) |w_j|^2_Q
      + sum_{j measured} eta^(t-j-1) |yhat_j - y_j|^2_R

over the window's first state ``x_s`` and its disturbance sequence.  States
are eliminated by forward rollout (single shooting), so the dynamics and
output equations hold by construction.  The problem is only solved when a
new measurement has arrived (``delta_t == 0``); in between, the estimate
is propagated open loop with zero disturbance, which gives the same answer.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg

from .lm import DivergenceError, LMSettings, levenberg_marquardt
from .model import NonlinearSystem, delta, horizon

__all__ = [
    "DivergenceError",
    "EstimatorConfig",
    "IossCertificate",
    "MheProblem",
    "MheSolution",
    "EstimatorState",
    "StepRecord",
    "UnsatisfiableHorizonError",
    "make_problem",
    "rollout",
    "cost",
    "assemble_residuals",
    "solve",
    "open_loop_predict",
    "init_estimator",
    "current_problem",
    "warm_start",
    "step",
    "generalized_lambda_max",
    "horizon_factor",
    "min_horizon",
    "error_bound",
]

_EPS = np.finfo(float).eps
_FD_SCALE = np.sqrt(_EPS)


def _sym_matrix(name, P, dim=None):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[0] != P.shape[1]:
        raise ValueError(f"{name} must be square, got {P.shape}")
    if dim is not None and P.shape[0] != dim:
        raise ValueError(f"{name} must be {dim}x{dim}, got {P.shape}")
    scale = max(1.0, float(np.max(np.abs(P))))
    if np.max(np.abs(P - P.T)) > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    P = 0.5 * (P + P.T)
    P.setflags(write=False)
    return P


def _require_pd(name, P):
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def _require_psd(name, P):
    ev = np.linalg.eigvalsh(P)
    if ev.size and ev.min() < -1e-12 * max(1.0, float(np.abs(ev).max())):
        raise ValueError(f"{name} is not positive semidefinite")


def _check_eta(eta):
    eta = float(eta)
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    return eta


def weight_root(P: np.ndarray) -> np.ndarray:
    """Matrix ``S`` with ``S.T @ S == P``.

    Uses the transposed Cholesky factor; positive semidefinite matrices that
    Cholesky rejects get the symmetric eigenvalue square root instead.
    """
    try:
        return np.linalg.cholesky(P).T
    except np.linalg.LinAlgError:
        ev, V = np.linalg.eigh(P)
        return np.sqrt(np.clip(ev, 0.0, None))[:, None] * V.T


@dataclass(frozen=True)
class EstimatorConfig:
    """Weights, discount and base horizon of the estimator.

    ``constraints`` is ``"unconstrained"`` or ``"projected"``.  In projected
    mode the first state and the disturbances are clamped onto the system's
    X and W boxes after every trial step.  This keeps the decision variables
    feasible but is not an exact treatment of active constraints, and rollout
    states beyond the first are only checked, not enforced.
    """

    M: int
    eta: float
    P2: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    solver: LMSettings = LMSettings()
    constraints: str = "unconstrained"

    def __post_init__(self):
        if int(self.M) < 1:
            raise ValueError("M must be >= 1")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "eta", _check_eta(self.eta))
        for name in ("P2", "Q", "R"):
            object.__setattr__(self, name, _sym_matrix(name, getattr(self, name)))
        _require_pd("P2", self.P2)
        _require_pd("Q", self.Q)
        _require_psd("R", self.R)
        if self.constraints not in ("unconstrained", "projected"):
            raise ValueError(f"unknown constraint mode {self.constraints!r}")

    def check_dims(self, system: NonlinearSystem):
        for name, dim in (("P2", system.n), ("Q", system.q), ("R", system.p)):
            if getattr(self, name).shape != (dim, dim):
                raise ValueError(f"{name} must be {dim}x{dim} for this system")


@dataclass(frozen=True)
class IossCertificate:
    """Parameters ``(P1, P2, Q, R, eta)`` of an exponential sample-based i-IOSS bound."""

    P1: np.ndarray
    P2: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    eta: float

    def __post_init__(self):
        for name in ("P1", "P2", "Q", "R"):
            object.__setattr__(self, name, _sym_matrix(name, getattr(self, name)))
        _require_pd("P1", self.P1)
        _require_pd("P2", self.P2)
        _require_psd("Q", self.Q)
        _require_psd("R", self.R)
        object.__setattr__(self, "eta", _check_eta(self.eta))
        if self.P1.shape != self.P2.shape:
            raise ValueError("P1 and P2 must have the same shape")


@dataclass(frozen=True, eq=False)
class MheProblem:
    """One estimation window ``[start, t]``.

    ``inputs`` holds ``u_start .. u_{t-1}`` row-wise and ``measurements`` the
    ``(j, y_j)`` pairs with ``start <= j <= t-1``.
    """

    system: NonlinearSystem
    config: EstimatorConfig
    t: int
    start: int
    prior: np.ndarray
    inputs: np.ndarray
    measurements: tuple

    @property
    def length(self) -> int:
        return self.t - self.start

    @property
    def n_vars(self) -> int:
        return self.system.n + self.system.q * self.length

    def split(self, z):
        n, q = self.system.n, self.system.q
        return z[:n], z[n:].reshape(self.length, q)

    def join(self, x_s, w) -> np.ndarray:
        return np.concatenate([np.asarray(x_s, float).reshape(-1), np.asarray(w, float).reshape(-1)])

    def discount(self, j: int) -> float:
        return self.config.eta ** (self.t - j - 1)

    @cached_property
    def measured_index(self) -> np.ndarray:
        return np.array([j - self.start for j, _ in self.measurements], dtype=int)

    @cached_property
    def measured_values(self) -> np.ndarray:
        return np.array([y for _, y in self.measurements], dtype=float).reshape(-1, self.system.p)

    @cached_property
    def _roots(self):
        cfg, L = self.config, self.length
        eta = cfg.eta
        sp = np.sqrt(2.0 * eta ** L) * weight_root(cfg.P2)
        sq = weight_root(cfg.Q)
        sr = weight_root(cfg.R)
        wscale = np.sqrt(2.0 * eta ** (L - 1 - np.arange(L)))
        yscale = np.sqrt(eta ** (L - 1 - self.measured_index.astype(float)))
        return sp, sq, wscale, sr, yscale

    @cached_property
    def _blocks(self):
        """Constant block-diagonal part of ``J'J``: prior block and per-step disturbance blocks."""
        sp, sq, wscale, _, _ = self._roots
        return sp.T @ sp, (wscale ** 2)[:, None, None] * (sq.T @ sq)


def make_problem(system, config, t, prior, inputs, measurements, start=None) -> MheProblem:
    """Build the window ending at ``t``.

    ``inputs`` may be the full input history (indexed from 0) or exactly the
    window's inputs; ``measurements`` is a mapping ``time -> y`` and is
    filtered to the window.  ``start`` defaults to ``t - M_t`` computed from
    the measurement times.
    """
    config.check_dims(system)
    if start is None:
        start = t - horizon(t, config.M, sorted(measurements)) if t > 0 else 0
    L = t - start
    if L < 0:
        raise ValueError("window start after t")
    u = np.asarray(inputs, dtype=float).reshape(-1, system.m) if system.m else np.zeros((len(inputs), 0))
    if len(u) >= t and len(u) != L:
        u = u[start:t]
    if len(u) != L:
        raise ValueError(f"need {L} inputs for the window, got {len(u)}")
    meas = tuple(
        (int(j), np.asarray(measurements[j], dtype=float).reshape(system.p))
        for j in sorted(measurements) if start <= j <= t - 1
    )
    prior = np.asarray(prior, dtype=float).reshape(system.n)
    return MheProblem(system, config, int(t), int(start), prior, u, meas)


def rollout(problem: MheProblem, x_s, w) -> np.ndarray:
    """State sequence ``x_start .. x_t`` generated by ``x_s`` and ``w``."""
    sys = problem.system
    X = np.empty((problem.length + 1, sys.n))
    X[0] = x_s
    for k in range(problem.length):
        X[k + 1] = sys.step(X[k], problem.inputs[k], w[k])
    return X


def window_outputs(problem: MheProblem, X, w) -> np.ndarray:
    sys = problem.system
    return np.array([sys.output(X[k], problem.inputs[k], w[k]) for k in range(problem.length)]).reshape(
        problem.length, sys.p
    )


def cost(problem: MheProblem, x_s, w) -> float:
    """Value of the windowed cost at ``(x_s, w)``, evaluated term by term."""
    cfg, sys = problem.config, problem.system
    x_s = np.asarray(x_s, dtype=float).reshape(sys.n)
    w = np.asarray(w, dtype=float).reshape(problem.length, sys.q)
    X = rollout(problem, x_s, w)
    dx = x_s - problem.prior
    J = 2.0 * cfg.eta ** problem.length * float(dx @ cfg.P2 @ dx)
    for k in range(problem.length):
        j = problem.start + k
        J += 2.0 * problem.discount(j) * float(w[k] @ cfg.Q @ w[k])
    for j, y in problem.measurements:
        k = j - problem.start
        e = sys.output(X[k], problem.inputs[k], w[k]) - y
        J += problem.discount(j) * float(e @ cfg.R @ e)
    return J


def _fd_pair(fun, x, u, w):
    """Central differences of ``fun`` with respect to ``x`` and ``w``."""
    def partial(v, rebuild):
        cols = []
        for i in range(v.size):
            h = _FD_SCALE * (1.0 + abs(v[i]))
            vp, vm = v.copy(), v.copy()
            vp[i] += h
            vm[i] -= h
            cols.append((np.asarray(rebuild(vp), float) - np.asarray(rebuild(vm), float)) / (2 * h))
        return np.array(cols).T
    dx = partial(np.asarray(x, float), lambda v: fun(v, u, w))
    dw = partial(np.asarray(w, float), lambda v: fun(x, u, v))
    return dx, dw


def _checked_jac(jac, fun, rows, n, q):
    """Partials callable; a supplied Jacobian has its shapes checked on first use only."""
    if jac is None:
        return lambda x, u, w: _fd_pair(fun, x, u, w)
    checked = False

    def call(x, u, w):
        nonlocal checked
        dx, dw = jac(x, u, w)
        if checked:
            return np.asarray(dx, float), np.asarray(dw, float)
        checked = True
        if np.shape(dx) != (rows, n) or np.shape(dw) != (rows, q):
            raise ValueError(f"Jacobian shapes {np.shape(dx)}, {np.shape(dw)}; expected ({rows}, {n}), ({rows}, {q})")
        return np.asarray(dx, float), np.asarray(dw, float)
    return call


def _evaluate(problem: MheProblem, z, with_jac: bool):
    """Residual stack and, optionally, the Jacobian rows of the output block.

    The prior and disturbance blocks of the Jacobian are constant; only the
    measured-output rows depend on ``z``.  They are obtained by propagating
    the sensitivity ``dx_k/dz`` forward through the per-step partials.
    """
    sys = problem.system
    f, h = sys.f, sys.h
    n, q, p, L = sys.n, sys.q, sys.p, problem.length
    x_s, w = problem.split(z)
    sp, sq, wscale, sr, yscale = problem._roots
    meas_k = problem.measured_index
    ymeas = problem.measured_values
    nmeas = len(meas_k)
    inputs = problem.inputs

    r = np.empty(n + q * L + p * nmeas)
    r[:n] = sp @ (x_s - problem.prior)
    r[n:n + q * L] = (wscale[:, None] * (w @ sq.T)).reshape(-1)
    y0 = n + q * L

    meas_list = meas_k.tolist()
    E = np.empty((nmeas, p))
    if not with_jac:
        x = x_s
        mi = 0
        for k in range(meas_list[-1] + 1 if nmeas else 0):
            if meas_list[mi] == k:
                E[mi] = h(x, inputs[k], w[k])
                mi += 1
                if mi == nmeas:
                    break
            x = np.asarray(f(x, inputs[k], w[k]), dtype=float)
        r[y0:] = (yscale[:, None] * ((E - ymeas) @ sr.T)).reshape(-1)
        return r, None

    # sensitivity dx_k/dz is kept transposed, (n_vars, n), so the active rows stay contiguous
    nz = problem.n_vars
    Jy = np.zeros((nmeas, p, nz))
    ST = np.zeros((nz, n))
    ST[:n] = np.eye(n)
    buf = np.empty_like(ST)
    fjac = _checked_jac(sys.f_jac, f, n, n, q)
    hjac = _checked_jac(sys.h_jac, h, p, n, q)
    x = x_s
    mi = 0
    for k in range(meas_list[-1] + 1 if nmeas else 0):
        u_k, w_k = inputs[k], w[k]
        active = n + q * k
        if meas_list[mi] == k:
            E[mi] = h(x, u_k, w_k)
            Hx, Hw = hjac(x, u_k, w_k)
            Jy[mi, :, :active] = Hx @ ST[:active].T
            Jy[mi, :, active:active + q] = Hw
            mi += 1
            if mi == nmeas:
                break
        Fx, Fw = fjac(x, u_k, w_k)
        np.matmul(ST[:active], Fx.T, out=buf[:active])
        ST, buf = buf, ST
        ST[active:active + q] = Fw.T
        x = np.asarray(f(x, u_k, w_k), dtype=float)
    r[y0:] = (yscale[:, None] * ((E - ymeas) @ sr.T)).reshape(-1)
    Jy = (yscale[:, None, None] * (sr @ Jy)).reshape(p * nmeas, nz)
    return r, Jy


def _constant_jacobian(problem: MheProblem) -> np.ndarray:
    n, q, L = problem.system.n, problem.system.q, problem.length
    sp, sq, wscale, _, _ = problem._roots
    J0 = np.zeros((n + q * L, problem.n_vars))
    J0[:n, :n] = sp
    for k in range(L):
        J0[n + q * k:n + q * (k + 1), n + q * k:n + q * (k + 1)] = wscale[k] * sq
    return J0


class _WindowNormal:
    """``J'J = D + Jy'Jy`` with ``D`` block diagonal and ``Jy`` the output rows.

    Damped systems are solved through the Woodbury identity in coordinates
    scaled by the block Cholesky factors of ``D``, so the dense
    ``n_vars x n_vars`` matrix is never formed when there are fewer output
    rows than decision variables.
    """

    def __init__(self, Dp, Dw, Jy):
        self.Dp, self.Dw, self.Jy = Dp, Dw, Jy
        self.n = Dp.shape[0]
        self.L, self.q = Dw.shape[:2]

    def diagonal(self) -> np.ndarray:
        d = np.concatenate([np.diag(self.Dp), np.einsum("kii->ki", self.Dw).reshape(-1)])
        return d + np.einsum("ij,ij->j", self.Jy, self.Jy)

    def dense(self) -> np.ndarray:
        n, q = self.n, self.q
        H = self.Jy.T @ self.Jy
        H[:n, :n] += self.Dp
        for k in range(self.L):
            H[n + q * k:n + q * (k + 1), n + q * k:n + q * (k + 1)] += self.Dw[k]
        return H

    def solve(self, shift, rhs) -> np.ndarray:
        n, q, L = self.n, self.q, self.L
        Jy = self.Jy
        k = Jy.shape[0]
        if k >= n + q * L:
            H = self.dense()
            H[np.diag_indices_from(H)] += shift
            return linalg.cho_solve(linalg.cho_factor(H, check_finite=False), rhs, check_finite=False)
        Lp = np.linalg.cholesky(self.Dp + np.diag(shift[:n]))
        Lw = np.linalg.cholesky(self.Dw + shift[n:].reshape(L, q)[:, :, None] * np.eye(q))
        Ip = np.linalg.inv(Lp)
        Iw = np.linalg.inv(Lw)
        c = np.concatenate([Ip @ rhs[:n], np.einsum("bij,bj->bi", Iw, rhs[n:].reshape(L, q)).reshape(-1)])
        if k:
            B = np.concatenate(
                [Jy[:, :n] @ Ip.T, (Jy[:, n:].reshape(k, L, q).transpose(1, 0, 2) @ Iw.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(k, -1)],
                axis=1,
            )
            K = B @ B.T
            K[np.diag_indices_from(K)] += 1.0
            c = c - B.T @ linalg.cho_solve(linalg.cho_factor(K, check_finite=False), B @ c, check_finite=False)
        return np.concatenate([Ip.T @ c[:n], np.einsum("bji,bj->bi", Iw, c[n:].reshape(L, q)).reshape(-1)])


def _normal_equations(problem: MheProblem, z):
    """``(r, J'J, J'r)`` without forming the full Jacobian."""
    n, q, L = problem.system.n, problem.system.q, problem.length
    sp, sq, wscale, _, _ = problem._roots
    r, Jy = _evaluate(problem, z, with_jac=True)
    g = np.empty(problem.n_vars)
    g[:n] = sp.T @ r[:n]
    g[n:] = ((wscale[:, None] * r[n:n + q * L].reshape(L, q)) @ sq).reshape(-1)
    g += Jy.T @ r[n + q * L:]
    return r, _WindowNormal(*problem._blocks, Jy), g


def assemble_residuals(problem: MheProblem, x_s, w):
    """Weighted residual stack ``r`` and its Jacobian with respect to ``(x_s, w)``.

    ``r @ r`` equals :func:`cost`.  Blocks are ordered prior, disturbances
    (time order), then measured outputs (time order).  The Jacobian is
    propagated forward through the per-step partial derivatives of ``f``
    and ``h``, which come from the system when it provides them and from
    central differences otherwise.
    """
    z = problem.join(x_s, w)
    if z.size != problem.n_vars:
        raise ValueError(f"expected {problem.n_vars} decision variables, got {z.size}")
    r, Jy = _evaluate(problem, z, with_jac=True)
    return r, np.vstack([_constant_jacobian(problem), Jy])


@dataclass
class MheSolution:
    start: int
    t: int
    states: np.ndarray
    disturbances: np.ndarray
    outputs: np.ndarray
    cost: float
    iterations: int
    grad_norm: float
    converged: bool
    status: str
    feasible: bool = True

    @property
    def x_s(self) -> np.ndarray:
        return self.states[0]

    @property
    def estimate(self) -> np.ndarray:
        return self.states[-1]


def _projector(problem: MheProblem):
    sys = problem.system
    if problem.config.constraints != "projected":
        return None
    n, q, L = sys.n, sys.q, problem.length
    lo = np.full(problem.n_vars, -np.inf)
    hi = np.full(problem.n_vars, np.inf)
    if sys.x_bounds is not None:
        lo[:n], hi[:n] = sys.x_bounds
    if sys.w_bounds is not None:
        lo[n:] = np.tile(sys.w_bounds[0], L)
        hi[n:] = np.tile(sys.w_bounds[1], L)
    return lambda z: np.clip(z, lo, hi)


def _inside(v, box, tol=1e-9):
    if box is None:
        return True
    return bool(np.all(v >= box[0] - tol) and np.all(v <= box[1] + tol))


def solve(problem: MheProblem, init=None) -> MheSolution:
    """Minimise the window cost with Levenberg-Marquardt.

    ``init`` is an ``(x_s, w)`` pair; the default is ``(prior, 0)``.  A run
    that hits the iteration limit returns its best iterate with
    ``converged=False``.  Raises :class:`DivergenceError` if the rollout from
    ``init`` is already non-finite.
    """
    sys = problem.system
    if init is None:
        init = (problem.prior, np.zeros((problem.length, sys.q)))
    z0 = problem.join(*init)
    # trial points are nearly always accepted, so each trial evaluation also
    # builds the normal equations and the accepted point reuses them
    last = {}

    def normal(z):
        key = z.tobytes()
        if last.get("key") != key:
            last["key"], last["value"] = key, _normal_equations(problem, z)
        return last["value"]

    res = levenberg_marquardt(
        z0,
        lambda z: normal(z)[0],
        normal,
        problem.config.solver,
        project=_projector(problem),
    )
    x_s, w = problem.split(res.z)
    w = w.copy()
    X = rollout(problem, x_s, w)
    Y = window_outputs(problem, X, w)
    feasible = all(_inside(x, sys.x_bounds) for x in X) and all(_inside(v, sys.w_bounds) for v in w) and all(
        _inside(y, sys.y_bounds) for y in Y
    )
    return MheSolution(
        start=problem.start, t=problem.t, states=X, disturbances=w, outputs=Y,
        cost=res.cost, iterations=res.iterations, grad_norm=res.grad_norm,
        converged=res.converged, status=res.status, feasible=feasible,
    )


def open_loop_predict(x_prev, u_prev, sys: NonlinearSystem) -> np.ndarray:
    """``f(x_prev, u_prev, 0)``."""
    return sys.step(np.asarray(x_prev, float), np.asarray(u_prev, float).reshape(sys.m), np.zeros(sys.q))


@dataclass
class StepRecord:
    t: int
    solved: bool
    horizon: int
    iterations: int = 0
    converged: bool = True
    cost: float = float("nan")


@dataclass
class EstimatorState:
    """Running estimator.  Owned by one caller and advanced with :func:`step`."""

    system: NonlinearSystem
    config: EstimatorConfig
    t: int
    estimates: list
    inputs: list = field(default_factory=list)
    measurements: dict = field(default_factory=dict)
    last_solution: Optional[MheSolution] = None
    records: list = field(default_factory=list)
    _times: list = field(default_factory=list, repr=False)

    @property
    def estimate(self) -> np.ndarray:
        return self.estimates[-1]

    @property
    def measurement_times(self) -> list:
        return list(self._times)

    @property
    def solves(self) -> int:
        return sum(r.solved for r in self.records)


def init_estimator(system: NonlinearSystem, config: EstimatorConfig, x_hat0) -> EstimatorState:
    config.check_dims(system)
    x0 = np.asarray(x_hat0, dtype=float).reshape(system.n)
    return EstimatorState(system, config, 0, [x0], records=[StepRecord(0, False, 0)])


def current_problem(state: EstimatorState, t: Optional[int] = None) -> MheProblem:
    """Problem at time ``t`` (default: the state's current time).

    The prior is the estimate stored at ``t - M_t``; only measurements before
    ``t`` are used.
    """
    t = state.t if t is None else t
    known = state._times[:bisect.bisect_left(state._times, t)]
    M_t = horizon(t, state.config.M, known) if t > 0 else 0
    s = t - M_t
    return make_problem(
        state.system, state.config, t, state.estimates[s], state.inputs[s:t],
        {j: state.measurements[j] for j in known if j >= s}, start=s,
    )


def warm_start(state: EstimatorState, problem: MheProblem):
    """Initial guess built from the last solution.

    The previous disturbance sequence is shifted onto the new window and
    padded with zeros; the first state is read from the previous state
    sequence at the new window start (or from the estimate history when the
    window starts after the previous one ended).
    """
    sys = problem.system
    prev = state.last_solution
    w = np.zeros((problem.length, sys.q))
    if prev is None or problem.start < prev.start:
        return problem.prior.copy(), w
    s = problem.start
    if s <= prev.t:
        x_s = prev.states[s - prev.start].copy()
    else:
        x_s = np.asarray(state.estimates[s], float).copy()
    for k in range(problem.length):
        j = s + k
        if prev.start <= j < prev.t:
            w[k] = prev.disturbances[j - prev.start]
    return x_s, w


def step(state: EstimatorState, u_prev, new_measurements=None) -> EstimatorState:
    """Advance ``state`` from ``t - 1`` to ``t``.

    ``u_prev`` is ``u_{t-1}``; ``new_measurements`` maps times ``< t`` to
    outputs that became available.  The window problem is solved when a new
    measurement arrived at ``t - 1`` (``delta_t == 0``), otherwise the
    previous estimate is propagated open loop.
    """
    sys = state.system
    t = state.t + 1
    u = np.asarray(u_prev if u_prev is not None else np.zeros(sys.m), dtype=float).reshape(sys.m)
    for j, y in (new_measurements or {}).items():
        j = int(j)
        if j >= t:
            raise ValueError(f"measurement at {j} is not available before time {t}")
        if j not in state.measurements:
            bisect.insort(state._times, j)
        state.measurements[j] = np.asarray(y, dtype=float).reshape(sys.p)
    state.inputs.append(u)
    state.t = t

    d = delta(t, state._times[:bisect.bisect_left(state._times, t)])
    if d == 0:
        problem = current_problem(state)
        sol = solve(problem, warm_start(state, problem))
        state.last_solution = sol
        state.estimates.append(sol.estimate.copy())
        state.records.append(StepRecord(t, True, problem.length, sol.iterations, sol.converged, sol.cost))
    else:
        state.estimates.append(open_loop_predict(state.estimates[-1], u, sys))
        state.records.append(StepRecord(t, False, horizon(t, state.config.M, state._times)))
    return state


class UnsatisfiableHorizonError(ValueError):
    pass


def generalized_lambda_max(P: np.ndarray, S: np.ndarray) -> float:
    """Largest ``lam`` with ``det(P - lam S) = 0`` for symmetric ``P`` and SPD ``S``."""
    return float(linalg.eigh(P, S, eigvals_only=True)[-1])


def horizon_factor(cert: IossCertificate, M: int) -> float:
    """``4 lam_max(P2, P1)^2 eta^M``; the horizon is admissible when this is below 1."""
    lam = generalized_lambda_max(cert.P2, cert.P1)
    return 4.0 * lam ** 2 * cert.eta ** M


def min_horizon(cert: IossCertificate, d_max: int, max_horizon: int = 1_000_000) -> int:
    """Smallest ``M >= max(1, d_max)`` with ``4 lam_max(P2, P1)^2 eta^M < 1``."""
    lam = generalized_lambda_max(cert.P2, cert.P1)
    c = 4.0 * lam ** 2
    M = max(1, int(d_max))
    if c * cert.eta ** M < 1.0:
        return M
    if cert.eta == 0.0:
        return M
    # eta^M < 1/c  <=>  M > log(c) / -log(eta); start just below and scan
    lower = M
    guess = int(np.floor(np.log(c) / -np.log(cert.eta))) - 1
    M = max(M, guess)
    while M > lower and c * cert.eta ** (M - 1) < 1.0:
        M -= 1
    while c * cert.eta ** M >= 1.0:
        M += 1
        if M > max_horizon:
            raise UnsatisfiableHorizonError(f"no horizon up to {max_horizon} satisfies the condition")
    return M


def error_bound(cert: IossCertificate, M: int, e0_norm: float, w_norms, t: int) -> float:
    """Envelope on ``|x_t - xhat_t|`` guaranteed for horizon ``M``.

    ``2 sqrt(lam P2P1 * lmax(P2)/lmin(P1)) sqrt(rho)^t |e0|
    + 2 sqrt(lam P2P1 * lmax(Q)/lmin(P1)) sum_j sqrt(rho)^(t-j-1) |w_j|``
    with ``rho = (4 lam^2 eta^M)^(1/M)``.
    """
    factor = horizon_factor(cert, M)
    if not factor < 1.0:
        raise UnsatisfiableHorizonError(f"horizon {M} does not satisfy the contraction condition ({factor:.4g})")
    lam = generalized_lambda_max(cert.P2, cert.P1)
    lmin_p1 = float(np.linalg.eigvalsh(cert.P1)[0])
    lmax_p2 = float(np.linalg.eigvalsh(cert.P2)[-1])
    lmax_q = float(np.linalg.eigvalsh(cert.Q)[-1])
    sr = np.sqrt(factor ** (1.0 / M))
    w_norms = np.asarray(w_norms, dtype=float).reshape(-1)
    if t > 0 and w_norms.size < t:
        raise ValueError(f"need {t} disturbance norms, got {w_norms.size}")
    bound = 2.0 * np.sqrt(lam * lmax_p2 / lmin_p1) * sr ** t * e0_norm
    if t > 0:
        powers = sr ** (t - 1 - np.arange(t))
        bound += 2.0 * np.sqrt(lam * lmax_q / lmin_p1) * float(powers @ w_norms[:t])
    return float(bound)
