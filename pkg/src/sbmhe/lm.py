"""Levenberg-Marquardt for small dense nonlinear least-squares problems."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class DenseNormal:
    """Gauss-Newton matrix ``J'J`` held as a dense array."""

    def __init__(self, H: np.ndarray):
        self.H = np.asarray(H, dtype=float)

    def diagonal(self) -> np.ndarray:
        return np.diag(self.H).copy()

    def solve(self, shift: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """Solve ``(J'J + diag(shift)) x = rhs``; raises ``LinAlgError`` if not PD."""
        c = cho_factor(self.H + np.diag(shift), check_finite=False)
        return cho_solve(c, rhs, check_finite=False)


_ROUNDOFF = 16 * np.finfo(float).eps


class DivergenceError(RuntimeError):
    """Residuals became non-finite at the starting point."""


@dataclass(frozen=True)
class LMSettings:
    max_iter: int = 200
    gtol: float = 1e-10
    xtol: float = 1e-15
    step_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_scale: float = 10.0
    damping_max: float = 1e16


@dataclass
class LMResult:
    z: np.ndarray
    residual: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    status: str


def levenberg_marquardt(
    z0: np.ndarray,
    residual: Callable[[np.ndarray], np.ndarray],
    normal: Callable[[np.ndarray], tuple],
    settings: LMSettings = LMSettings(),
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> LMResult:
    """Minimise ``||r(z)||^2``.

    ``residual(z)`` returns ``r``; ``normal(z)`` returns ``(r, A, J'r)`` where
    ``A`` is ``J'J`` as an array or any object with the ``diagonal`` and
    ``solve`` methods of :class:`DenseNormal` (see :func:`from_jacobian` for a
    plain ``(r, J)`` callable).

    The damped normal equations use Marquardt scaling, ``(J'J + mu diag(J'J)) dz = -J'r``.
    ``mu`` starts at ``damping_init`` and is divided by ``damping_scale`` after
    an accepted step, multiplied after a rejected one.  Trial points whose
    residual is non-finite (or that raise ``ValueError`` from the model) count
    as rejections.  Near the optimum the cost change drops below rounding
    error; a trial whose cost matches the current one to that level is
    accepted if it lowers ``||J'r||``.

    Stops with ``status``:

    * ``"gtol"``: ``||J'r||_inf <= gtol`` (first-order optimality).  Once the
      gradient is that small, undamped refinement steps continue until a step
      is below ``step_tol * (||z|| + 1)`` or fails to improve; on badly scaled
      problems a small gradient alone leaves the iterate far from the minimiser.
    * ``"xtol"``: accepted step below ``xtol * (||z|| + xtol)``.
    * ``"maxiter"`` / ``"stalled"``: not converged; the best iterate is returned.
    """
    z = np.array(z0, dtype=float)
    if project is not None:
        z = project(z)
    r, H, g = _unpack(normal(z))
    if not np.all(np.isfinite(r)):
        raise DivergenceError("non-finite residuals at the initial point")
    cost = float(r @ r)
    mu = settings.damping_init
    status = "maxiter"
    it = 0
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0

    step_norm = None
    while True:
        polishing = gnorm <= settings.gtol
        if polishing and (step_norm is None or step_norm <= settings.step_tol * (float(np.linalg.norm(z)) + 1.0)):
            status = "gtol"
            break
        if it >= settings.max_iter:
            status = "gtol" if polishing else "maxiter"
            break
        it += 1
        diag = H.diagonal()
        diag = np.maximum(diag, 1e-12 * max(1.0, float(np.max(diag)) if diag.size else 0.0))
        accepted = False
        pending = None
        while mu <= settings.damping_max:
            try:
                dz = -H.solve(mu * diag, g)
            except LinAlgError:
                mu *= settings.damping_scale
                continue
            z_new = z + dz
            if project is not None:
                z_new = project(z_new)
            try:
                r_new = residual(z_new)
            except (ValueError, FloatingPointError):
                r_new = None
            if r_new is not None and np.all(np.isfinite(r_new)):
                cost_new = float(r_new @ r_new)
                if cost_new <= cost:
                    accepted = True
                    break
                if cost_new <= cost * (1.0 + _ROUNDOFF):
                    # cost change lost in rounding: judge the step by the gradient instead
                    pending = _unpack(normal(z_new))
                    if pending[2].size and np.max(np.abs(pending[2])) < gnorm:
                        accepted = True
                        break
                    pending = None
            if polishing:
                break
            mu *= settings.damping_scale
        if not accepted:
            status = "gtol" if polishing else "stalled"
            break
        step = z_new - z
        step_norm = float(np.linalg.norm(step))
        z = z_new
        small = step_norm <= settings.xtol * (float(np.linalg.norm(z)) + settings.xtol)
        mu = max(mu / settings.damping_scale, 1e-15)
        r, H, g = pending if pending is not None else _unpack(normal(z))
        cost = float(r @ r)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if small and gnorm > settings.gtol:
            status = "xtol"
            break

    return LMResult(
        z=z, residual=r, cost=cost, grad_norm=gnorm, iterations=it,
        converged=status in ("gtol", "xtol"), status=status,
    )


def _unpack(out):
    r, H, g = out
    if isinstance(H, np.ndarray):
        H = DenseNormal(H)
    return r, H, g


def from_jacobian(residual_jac: Callable[[np.ndarray], tuple]) -> Callable[[np.ndarray], tuple]:
    """Adapt ``z -> (r, J)`` to the ``z -> (r, J'J, J'r)`` form."""
    def normal(z):
        r, J = residual_jac(z)
        return r, J.T @ J, J.T @ r
    return normal
