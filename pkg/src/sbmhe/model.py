"""Plants, measurement schedules and horizon arithmetic.

A plant is the discrete-time system

    x[t+1] = f(x[t], u[t], w[t])
    y[t]   = h(x[t], u[t], w[t])

with optional per-coordinate boxes on x, w and y.  Measurement times are
either generated by cyclically repeating a finite gap pattern or given
explicitly.
"""
from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ModelDomainError",
    "NonlinearSystem",
    "LinearSystem",
    "GapSequence",
    "SamplingSchedule",
    "k_set_times",
    "delta",
    "horizon",
    "linear_as_nonlinear",
]

JacFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


class ModelDomainError(ValueError):
    """Raised when a model is evaluated outside the region where it is defined."""


def _box(bounds, dim, name):
    if bounds is None:
        return None
    lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in bounds)
    if lo.shape != (dim,) or hi.shape != (dim,):
        raise ValueError(f"{name} box must have two vectors of length {dim}")
    if np.any(lo > hi):
        raise ValueError(f"{name} box has lower bound above upper bound")
    return lo, hi


@dataclass(frozen=True)
class NonlinearSystem:
    """Discrete-time plant ``x+ = f(x, u, w)``, ``y = h(x, u, w)``.

    ``f_jac`` and ``h_jac`` are optional and return the pair of partial
    derivatives ``(d/dx, d/dw)``.  When absent, the estimator falls back to
    central finite differences.  Box bounds are ``(lower, upper)`` pairs and
    may contain infinities.
    """

    n: int
    m: int
    q: int
    p: int
    f: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    f_jac: Optional[JacFn] = None
    h_jac: Optional[JacFn] = None
    x_bounds: Optional[tuple] = None
    w_bounds: Optional[tuple] = None
    y_bounds: Optional[tuple] = None
    name: str = "system"

    def __post_init__(self):
        for attr in ("n", "q", "p"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be positive")
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        object.__setattr__(self, "x_bounds", _box(self.x_bounds, self.n, "X"))
        object.__setattr__(self, "w_bounds", _box(self.w_bounds, self.q, "W"))
        object.__setattr__(self, "y_bounds", _box(self.y_bounds, self.p, "Y"))

    def step(self, x, u, w) -> np.ndarray:
        out = np.asarray(self.f(x, u, w), dtype=float).reshape(-1)
        if out.shape != (self.n,):
            raise ValueError(f"f returned shape {out.shape}, expected ({self.n},)")
        return out

    def output(self, x, u, w) -> np.ndarray:
        out = np.asarray(self.h(x, u, w), dtype=float).reshape(-1)
        if out.shape != (self.p,):
            raise ValueError(f"h returned shape {out.shape}, expected ({self.p},)")
        return out


@dataclass(frozen=True)
class LinearSystem:
    """``x+ = A x + B u + w``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise ValueError(f"C must have {n} columns, got {C.shape}")
        p = C.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        D = np.asarray(self.D, dtype=float).reshape(p, -1)
        if B.shape[1] != D.shape[1]:
            raise ValueError("B and D must have the same number of input columns")
        for k, v in zip("ABCD", (A, B, C, D)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_matrices(cls, A, C, B=None, D=None) -> "LinearSystem":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        C = np.atleast_2d(np.asarray(C, dtype=float))
        if B is None:
            B = np.zeros((A.shape[0], 0))
        if D is None:
            D = np.zeros((C.shape[0], np.asarray(B).reshape(A.shape[0], -1).shape[1]))
        return cls(A, B, C, D)


def linear_as_nonlinear(sys: LinearSystem) -> NonlinearSystem:
    """Wrap a linear system as a general plant with additive state disturbance.

    The disturbance enters the state only (``q == n``); outputs are noise free.
    Exact Jacobians are attached.
    """
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, p = sys.n, sys.p
    eye = np.eye(n)
    zero_hw = np.zeros((p, n))

    def f(x, u, w):
        return A @ x + B @ np.asarray(u, dtype=float).reshape(-1) + w

    def h(x, u, w):
        return C @ x + D @ np.asarray(u, dtype=float).reshape(-1)

    return NonlinearSystem(
        n=n, m=sys.m, q=n, p=p, f=f, h=h,
        f_jac=lambda x, u, w: (A, eye),
        h_jac=lambda x, u, w: (C, zero_hw),
        name="linear",
    )


@dataclass(frozen=True)
class GapSequence:
    """Finite gap pattern, repeated cyclically to give an infinite sequence."""

    pattern: tuple

    def __post_init__(self):
        pat = tuple(int(d) for d in self.pattern)
        if not pat:
            raise ValueError("gap pattern must be nonempty")
        if any(d < 1 for d in pat):
            raise ValueError("gaps must be >= 1")
        object.__setattr__(self, "pattern", pat)

    @property
    def d_max(self) -> int:
        return max(self.pattern)

    @property
    def period(self) -> int:
        """Time span of one full pass through the pattern."""
        return sum(self.pattern)

    @property
    def mean_gap(self) -> float:
        return self.period / len(self.pattern)

    def gap(self, i: int) -> int:
        """Return ``d_i`` (1-based, cyclic)."""
        return self.pattern[(i - 1) % len(self.pattern)]


def k_set_times(gaps: GapSequence, i: int, count: int) -> list:
    """First ``count`` elements of the sampling set ``K_i``.

    ``t_1 = d_i`` and ``t_j = t_{j-1} + d_{i+j-1}``.
    """
    if i < 1 or count < 1:
        raise ValueError("i and count must be >= 1")
    times = []
    t = 0
    for j in range(count):
        t += gaps.gap(i + j)
        times.append(t)
    return times


@dataclass(frozen=True)
class SamplingSchedule:
    """Strictly increasing measurement times over a finite horizon."""

    times: tuple
    source: str = "explicit"
    gaps: Optional[GapSequence] = None
    offset: Optional[int] = None
    _sorted: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = tuple(int(t) for t in self.times)
        if any(t < 0 for t in times):
            raise ValueError("measurement times must be nonnegative")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("measurement times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "_sorted", list(times))

    @classmethod
    def from_gaps(cls, gaps: GapSequence, offset: int, until: int) -> "SamplingSchedule":
        """All times of ``K_offset`` that are ``<= until``."""
        times = []
        t, j = 0, 0
        while True:
            t += gaps.gap(offset + j)
            if t > until:
                break
            times.append(t)
            j += 1
        return cls(tuple(times), source="gaps", gaps=gaps, offset=offset)

    @classmethod
    def from_csv(cls, path) -> "SamplingSchedule":
        """Read a one-column CSV with header ``t``."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["t"]:
                raise ValueError(f"{path}: expected a single column with header 't'")
            times = [int(row["t"]) for row in reader]
        return cls(tuple(times), source=f"file:{Path(path).name}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t\n")
            for t in self.times:
                fh.write(f"{t}\n")

    def __contains__(self, t) -> bool:
        k = bisect.bisect_left(self._sorted, t)
        return k < len(self._sorted) and self._sorted[k] == t

    def __len__(self) -> int:
        return len(self.times)

    def last_before(self, t: int) -> Optional[int]:
        """Largest measurement time strictly below ``t`` (None if there is none)."""
        k = bisect.bisect_left(self._sorted, t)
        return self._sorted[k - 1] if k > 0 else None

    def within(self, lo: int, hi: int) -> list:
        """Measurement times in the closed interval ``[lo, hi]``."""
        a = bisect.bisect_left(self._sorted, lo)
        b = bisect.bisect_right(self._sorted, hi)
        return self._sorted[a:b]

    def max_gap(self) -> int:
        if len(self.times) < 2:
            return self.times[0] if self.times else 0
        return int(max(max(np.diff(self.times)), self.times[0]))


def _last_before(times, t):
    if isinstance(times, SamplingSchedule):
        return times.last_before(t)
    prior = [j for j in times if j < t]
    return max(prior) if prior else None


def delta(t: int, schedule) -> int:
    """Steps elapsed since the last available measurement.

    ``delta_t = t - 1 - max({0} U {j in K_s : j < t})``, with ``delta_0 = 0``.
    ``schedule`` is a :class:`SamplingSchedule` or any iterable of times.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0
    last = _last_before(schedule, t)
    return t - 1 - max(0, last if last is not None else 0)


def horizon(t: int, M: int, schedule) -> int:
    """Time-varying horizon ``M_t = min(t, M + delta_t)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return min(t, M + delta(t, schedule))


def as_schedule(times: Sequence[int] | SamplingSchedule) -> SamplingSchedule:
    if isinstance(times, SamplingSchedule):
        return times
    return SamplingSchedule(tuple(sorted(times)))
