"""Sizing the horizon from a stability certificate, and checking the promise.

For x+ = x/2 + w with y = x, the weights P1 = 1/3, P2 = Q = R = 1, eta = 1/2
satisfy the exponential incremental stability inequality (checked here on a
grid of initial differences and disturbance sequences).  The horizon rule then
gives the shortest window that guarantees a contracting error, and the error
of an actual run has to stay under the resulting envelope.
"""
import itertools
from pathlib import Path

import numpy as np

from sbmhe.mhe import EstimatorConfig, IossCertificate, error_bound, horizon_factor, min_horizon
from sbmhe.model import GapSequence, LinearSystem, linear_as_nonlinear
from sbmhe.sim import Scenario, ScheduleSpec, draw_disturbances, run_experiment
from sbmhe.svg import Series, line_chart, write_svg

a, P1, P2, Q, eta = 0.5, 1 / 3, 1.0, 1.0, 0.5

# %% Verify the certificate on a grid.  The inequality reads
#   P1 e_t^2 <= P2 e_0^2 eta^t + sum_j eta^(t-j-1) Q dw_j^2
worst = 0.0
for t in range(7):
    for combo in itertools.product((-1.0, -0.5, 0.0, 0.5, 1.0), repeat=t + 1):
        e = combo[0]
        for d in combo[1:]:
            e = a * e + d
        rhs = P2 * combo[0] ** 2 * eta ** t + sum(eta ** (t - j - 1) * Q * d * d for j, d in enumerate(combo[1:]))
        if rhs > 0:
            worst = max(worst, P1 * e * e / rhs)
print(f"largest lhs/rhs ratio on the grid: {worst:.3f} (must not exceed 1)")

cert = IossCertificate(P1=P1, P2=P2, Q=Q, R=1.0, eta=eta)
gaps = GapSequence((1, 3, 2))
for d_max in (1, 3, 8):
    M = min_horizon(cert, d_max)
    print(f"d_max = {d_max}: M = {M}, factor 4 lambda^2 eta^M = {horizon_factor(cert, M):.4f}")

# %% Run the estimator with the certified horizon and compare to the envelope.
M = min_horizon(cert, gaps.d_max)
sys = linear_as_nonlinear(LinearSystem.from_matrices([[a]], [[1.0]]))
scn = Scenario(sys, ScheduleSpec(gaps=gaps), [2.0], [-1.0], 60,
               EstimatorConfig(M=M, eta=eta, P2=P2, Q=Q, R=1.0), [0.05], seed=1)
res = run_experiment(scn)
e = res.errors
w = np.abs(draw_disturbances(scn.disturbance_bounds, scn.T_sim, scn.seed)[:, 0])
bound = np.array([error_bound(cert, M, e[0], w[:k], k) for k in range(len(e))])
print(f"\nerror stays under the envelope at every step: {bool(np.all(e <= bound))}")
print(f"tightest step: t = {int(np.argmax(e / bound))}, error/bound = {np.max(e / bound):.3f}")

out = Path(__file__).resolve().parent / "output"
out.mkdir(exist_ok=True)
t = np.arange(len(e))
write_svg(out / "envelope.svg", line_chart(
    [Series("log10 error", t, np.log10(np.maximum(e, 1e-16))), Series("log10 envelope", t, np.log10(bound))],
    "Certified envelope, scalar system", "t", "log10 norm"))
print(f"plot written to {out / 'envelope.svg'}")
