"""Two-state hypothalamic-pituitary-thyroid model, Euler-discretised.

State ``x = (TSH, FT4)``, input ``u = (G,)`` (medication effect on FT4) and
disturbance ``w = (w1, w2, w3)`` with ``w3`` the measurement noise on TSH::

    TSH+ = p1 tau (U - FT4) / (s1 + FT4) + p1 tau + (1 - d1 tau) TSH + w1
    FT4+ = tau p2 TSH / (s2 + TSH) + (1 - d2 tau) FT4 + G tau + w2
    y    = TSH + w3

Rates are per hour and ``tau`` is the step length in hours.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .model import ModelDomainError, NonlinearSystem

__all__ = ["ThyroidParams", "build_thyroid", "load_thyroid_params", "params_from_dict", "medication_inputs", "fixed_point"]

_HW = np.array([[0.0, 0.0, 1.0]])
_HX = np.array([[1.0, 0.0]])
_FW = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class ThyroidParams:
    p1: float
    p2: float
    s1: float
    s2: float
    d1: float
    d2: float
    U: float
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for k, v in asdict(self).items():
            if not np.isfinite(v):
                raise ValueError(f"{k} must be finite")

    @property
    def steps_per_day(self) -> int:
        return int(round(24.0 / self.tau))

    def to_dict(self) -> dict:
        return asdict(self)


def load_thyroid_params(path=None) -> ThyroidParams:
    """Read parameters from JSON; without a path, the bundled parameter file."""
    if path is None:
        text = resources.files("sbmhe").joinpath("data/thyroid_hypothyroid.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    if not isinstance(raw, dict):
        raise ValueError("thyroid parameters must be a JSON object")
    raw.pop("_comment", None)
    return params_from_dict(raw)


def params_from_dict(raw: dict) -> ThyroidParams:
    names = set(ThyroidParams.__dataclass_fields__)
    missing, extra = names - set(raw), set(raw) - names
    if missing:
        raise ValueError(f"thyroid parameters missing: {', '.join(sorted(missing))}")
    if extra:
        raise ValueError(f"unknown thyroid parameter(s): {', '.join(sorted(extra))}")
    try:
        return ThyroidParams(**{k: float(v) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ValueError(f"thyroid parameters: {exc}") from None


def build_thyroid(params: ThyroidParams) -> NonlinearSystem:
    """Plant with ``n=2``, ``m=1``, ``q=3``, ``p=1``.

    Raises :class:`ModelDomainError` when ``s1 + FT4 <= 0`` or ``s2 + TSH <= 0``.
    """
    p1, p2, s1, s2 = params.p1, params.p2, params.s1, params.s2
    d1, d2, U, tau = params.d1, params.d2, params.U, params.tau
    a1 = 1.0 - d1 * tau
    a2 = 1.0 - d2 * tau

    def guard(tsh, ft4):
        if not (s1 + ft4 > 0.0 and s2 + tsh > 0.0):
            raise ModelDomainError(f"thyroid model undefined at TSH={tsh:.6g}, FT4={ft4:.6g}")

    def f(x, u, w):
        tsh, ft4 = float(x[0]), float(x[1])
        guard(tsh, ft4)
        g = float(u[0]) if len(u) else 0.0
        return np.array([
            p1 * tau * (U - ft4) / (s1 + ft4) + p1 * tau + a1 * tsh + w[0],
            tau * p2 * tsh / (s2 + tsh) + a2 * ft4 + g * tau + w[1],
        ])

    def h(x, u, w):
        return np.array([x[0] + w[2]])

    def f_jac(x, u, w):
        tsh, ft4 = float(x[0]), float(x[1])
        guard(tsh, ft4)
        dx = np.array([
            [a1, -p1 * tau * (s1 + U) / (s1 + ft4) ** 2],
            [tau * p2 * s2 / (s2 + tsh) ** 2, a2],
        ])
        return dx, _FW

    return NonlinearSystem(
        n=2, m=1, q=3, p=1, f=f, h=h, f_jac=f_jac,
        h_jac=lambda x, u, w: (_HX, _HW), name="thyroid",
    )


def medication_inputs(T_sim: int, steps_per_day: int, start_day: float = 83, dose: float = 0.75,
                      skipped_days=(130,)) -> np.ndarray:
    """Medication signal ``G_t`` for ``t = 0 .. T_sim``.

    ``G = dose`` on every step from ``start_day`` on, except during the
    skipped days, and 0 before.
    """
    t = np.arange(T_sim + 1)
    day = t // steps_per_day
    G = np.where(t >= int(round(start_day * steps_per_day)), dose, 0.0)
    for d in skipped_days:
        G[day == d] = 0.0
    return G.reshape(-1, 1)


def fixed_point(params: ThyroidParams, G: float = 0.0, guess=(5.0, 8.0)) -> np.ndarray:
    """Equilibrium of the noise-free map for constant medication ``G``."""
    from scipy.optimize import fsolve

    sys = build_thyroid(params)
    u = np.array([G])
    w = np.zeros(3)
    return fsolve(lambda x: sys.step(x, u, w) - x, np.asarray(guess, float), xtol=1e-14)
