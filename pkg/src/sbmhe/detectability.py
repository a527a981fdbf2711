"""Sample-based observability and detectability tests for linear systems.

For ``x+ = A x + B u + w``, ``y = C x + D u`` measured only at some instants,
the stacked rows ``C A^tau`` over the sample instants decide whether the
initial state can be reconstructed.  If every sliding window of length
``T + 1`` of a periodic sampling set yields full column rank for the
unstable part of the system, the system satisfies the exponential
sample-based i-IOSS property the estimator needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .model import GapSequence, NonlinearSystem, k_set_times

__all__ = [
    "SampleTimes",
    "SpectralSplit",
    "DetectabilityVerdict",
    "Counterexample",
    "sampled_obs_matrix",
    "numerical_rank",
    "is_sample_observable",
    "window_sample_times",
    "rolling_window_check",
    "spectral_split",
    "unstable_check",
    "falsify_output_dominance",
]

DEFAULT_RANK_TOL = 1e4
DEFAULT_CIRCLE_TOL = 1e-9


class SampleTimes(tuple):
    """Sample instants: nonempty, nonnegative, strictly increasing."""

    def __new__(cls, taus: Sequence[int]):
        taus = tuple(int(t) for t in taus)
        if not taus:
            raise ValueError("need at least one sample time")
        if taus[0] < 0 or any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("sample times must be nonnegative and strictly increasing")
        return super().__new__(cls, taus)


def _pair(A, C):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    if C.shape[1] != A.shape[0]:
        raise ValueError(f"C must have {A.shape[0]} columns, got {C.shape}")
    return A, C


def sampled_obs_matrix(A, C, taus) -> np.ndarray:
    """Stack ``C A^tau`` for each sample instant (shape ``(k*p, n)``)."""
    A, C = _pair(A, C)
    taus = SampleTimes(taus)
    return np.vstack([C @ np.linalg.matrix_power(A, tau) for tau in taus])


def numerical_rank(O: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """Rank after scaling every nonzero row to unit length.

    Row scaling does not change the exact rank but removes the spread in
    magnitude between low and high matrix powers.  Singular values at or
    below ``rank_tol * max(rows, cols) * sigma_max * eps`` count as zero.
    """
    O = np.atleast_2d(np.asarray(O, dtype=float))
    if O.size == 0:
        return 0
    norms = np.linalg.norm(O, axis=1)
    keep = norms > 0
    if not np.any(keep):
        return 0
    O = O[keep] / norms[keep, None]
    s = np.linalg.svd(O, compute_uv=False)
    tol = rank_tol * max(O.shape) * s[0] * np.finfo(float).eps
    return int(np.sum(s > tol))


def is_sample_observable(A, C, taus, rank_tol: float = DEFAULT_RANK_TOL) -> bool:
    A, C = _pair(A, C)
    return numerical_rank(sampled_obs_matrix(A, C, taus), rank_tol) == A.shape[0]


def window_sample_times(gaps: GapSequence, T: int, t: int) -> list:
    """Exponents ``j - (t - T - 1)`` for ``j`` in ``K_1`` within ``[t - T - 1, t - 1]``."""
    lo, hi = t - T - 1, t - 1
    count = hi // min(gaps.pattern) + 1
    return [j - lo for j in k_set_times(gaps, 1, count) if lo <= j <= hi]


def _window_ranks_full(A, C, gaps, T, ts, rank_tol):
    n = A.shape[0]
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    for t in ts:
        taus = window_sample_times(gaps, T, t)
        if not taus:
            return False
        O = np.vstack([C @ powers[k] for k in taus])
        if numerical_rank(O, rank_tol) < n:
            return False
    return True


def rolling_window_check(A, C, gaps: GapSequence, T: int, rank_tol: float = DEFAULT_RANK_TOL,
                         periods: int = 1) -> bool:
    """True if every window ``K_1 ∩ [t-T-1, t-1]``, ``t > T``, gives full column rank.

    The window contents repeat with the pattern's time period ``S`` (a window
    shifted by ``S`` contains the shifted samples of the original, possibly
    more), so checking ``t`` in ``(T, T + S]`` decides all ``t > T``.
    ``periods > 1`` extends the scan, for cross-checking.
    """
    A, C = _pair(A, C)
    if T < gaps.d_max:
        raise ValueError(f"T={T} is smaller than the largest gap {gaps.d_max}")
    if A.shape[0] == 0:
        return True
    ts = range(T + 1, T + periods * gaps.period + 1)
    return _window_ranks_full(A, C, gaps, T, ts, rank_tol)


@dataclass(frozen=True)
class SpectralSplit:
    """Block-diagonal split of ``A`` into stable and unstable/marginal parts.

    ``transform`` maps split coordinates to original ones:
    ``inv(transform) @ A @ transform == blkdiag(A_s, A_us)`` and
    ``C @ transform == [C_s, C_us]``.  ``schur_basis`` is the orthogonal
    factor of the ordered real Schur form, ``coupling`` the Sylvester
    solution that removes the off-diagonal block.
    """

    transform: np.ndarray
    schur_basis: np.ndarray
    coupling: np.ndarray
    A_s: np.ndarray
    A_us: np.ndarray
    C_s: np.ndarray
    C_us: np.ndarray
    eig_s: np.ndarray
    eig_us: np.ndarray
    circle_tol: float

    @property
    def n_stable(self) -> int:
        return self.A_s.shape[0]

    @property
    def n_unstable(self) -> int:
        return self.A_us.shape[0]

    def block_diagonal(self) -> np.ndarray:
        return linalg.block_diag(self.A_s, self.A_us)

    def reassemble(self) -> np.ndarray:
        return self.transform @ self.block_diagonal() @ np.linalg.inv(self.transform)


def spectral_split(A, C, circle_tol: float = DEFAULT_CIRCLE_TOL) -> SpectralSplit:
    """Separate eigenvalues with ``|lam| < 1 - circle_tol`` from the rest.

    Ordered real Schur form puts the stable eigenvalues first; a Sylvester
    equation then removes the coupling block.  Eigenvalues within
    ``circle_tol`` of the unit circle go to the unstable block.
    """
    A, C = _pair(A, C)
    n = A.shape[0]
    T, Z, k = linalg.schur(A, output="real", sort=lambda re, im: np.hypot(re, im) < 1.0 - circle_tol)
    A11, A12, A22 = T[:k, :k], T[:k, k:], T[k:, k:]
    if 0 < k < n:
        X = linalg.solve_sylvester(A11, -A22, -A12)
    else:
        X = np.zeros((k, n - k))
    V = np.eye(n)
    V[:k, k:] = X
    transform = Z @ V
    CJ = C @ transform
    return SpectralSplit(
        transform=transform, schur_basis=Z, coupling=X,
        A_s=A11.copy(), A_us=A22.copy(), C_s=CJ[:, :k], C_us=CJ[:, k:],
        eig_s=np.sort_complex(linalg.eigvals(A11)) if k else np.zeros(0, complex),
        eig_us=np.sort_complex(linalg.eigvals(A22)) if k < n else np.zeros(0, complex),
        circle_tol=circle_tol,
    )


def _fmt_eig(e) -> str:
    e = complex(e)
    if e.imag == 0.0:
        return f"{e.real:.6g}"
    return f"{e.real:.6g}{e.imag:+.6g}j"


@dataclass(frozen=True)
class DetectabilityVerdict:
    detectable: bool
    split: SpectralSplit
    T: int
    gaps: GapSequence

    def __bool__(self) -> bool:
        return self.detectable

    def summary(self) -> str:
        s = self.split
        lines = [
            f"stable modes: {s.n_stable}  unstable/marginal modes: {s.n_unstable}",
            "unstable eigenvalues: " + (", ".join(_fmt_eig(e) for e in s.eig_us) or "none"),
            f"detectable: {'yes' if self.detectable else 'no'}",
        ]
        return "\n".join(lines)


def unstable_check(A, C, gaps: GapSequence, T: int, rank_tol: float = DEFAULT_RANK_TOL,
                   circle_tol: float = DEFAULT_CIRCLE_TOL) -> DetectabilityVerdict:
    """Rolling-window observability of the unstable part of ``(A, C)``.

    A true verdict certifies sample-based exponential i-IOSS with respect to
    the sampling sets generated by ``gaps``.  A fully stable ``A`` passes
    for any sampling.
    """
    A, C = _pair(A, C)
    if T < gaps.d_max:
        raise ValueError(f"T={T} is smaller than the largest gap {gaps.d_max}")
    split = spectral_split(A, C, circle_tol)
    if split.n_unstable == 0:
        ok = True
    else:
        ok = rolling_window_check(split.A_us, split.C_us, gaps, T, rank_tol)
    return DetectabilityVerdict(ok, split, T, gaps)


@dataclass
class Counterexample:
    trial: int
    t: int
    dy_norm: float
    bound: float
    x0: np.ndarray
    x0_tilde: np.ndarray
    w: np.ndarray
    w_tilde: np.ndarray


def _draw_box(rng, box, dim, size, default_scale):
    if box is None:
        return rng.normal(scale=default_scale, size=(size, dim))
    lo, hi = box
    lo = np.where(np.isfinite(lo), lo, -default_scale)
    hi = np.where(np.isfinite(hi), hi, default_scale)
    return rng.uniform(lo, hi, size=(size, dim))


def falsify_output_dominance(sys: NonlinearSystem, gaps: GapSequence, i: int, a_h: float, a_w: float,
                             t_star: int, horizon: int, trials: int, seed: int,
                             inputs=None, x_scale: float = 1.0, rtol: float = 1e-12) -> Optional[Counterexample]:
    """Search for a trajectory pair violating the output-dominance inequality.

    For random pairs of initial states and disturbance sequences (drawn
    inside the X and W boxes where finite, Gaussian with scale ``x_scale``
    otherwise) checks, at every ``t`` in ``[t_star, horizon]``,

        |dy_t| <= max( max_{j in K_i, j < t} a_h |dy_j|,  max_{j < t} a_w |dw_j| )

    and returns the first violation found.  ``None`` is evidence, not proof.
    """
    if a_h <= 0 or a_w <= 0:
        raise ValueError("a_h and a_w must be positive")
    if horizon < t_star:
        raise ValueError("horizon must be >= t_star")
    rng = np.random.Generator(np.random.Philox(seed))
    count = horizon // min(gaps.pattern) + 1
    sampled = {j for j in k_set_times(gaps, i, count) if j <= horizon}
    U = np.zeros((horizon + 1, sys.m)) if inputs is None else np.asarray(inputs, float).reshape(-1, sys.m)

    for trial in range(trials):
        x0 = _draw_box(rng, sys.x_bounds, sys.n, 1, x_scale)[0]
        xt0 = _draw_box(rng, sys.x_bounds, sys.n, 1, x_scale)[0]
        W = _draw_box(rng, sys.w_bounds, sys.q, horizon + 1, x_scale)
        Wt = _draw_box(rng, sys.w_bounds, sys.q, horizon + 1, x_scale)
        x, xt = x0, xt0
        best_y = 0.0
        best_w = 0.0
        for t in range(horizon + 1):
            dy = float(np.linalg.norm(sys.output(x, U[t], W[t]) - sys.output(xt, U[t], Wt[t])))
            if t >= t_star:
                bound = max(a_h * best_y, a_w * best_w)
                if dy > bound * (1.0 + rtol):
                    return Counterexample(trial, t, dy, bound, x0, xt0, W[:t], Wt[:t])
            if t in sampled:
                best_y = max(best_y, dy)
            best_w = max(best_w, float(np.linalg.norm(W[t] - Wt[t])))
            x = sys.step(x, U[t], W[t])
            xt = sys.step(xt, U[t], Wt[t])
    return None
