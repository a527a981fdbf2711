"""When do irregular samples still pin down the state of a linear system?

Three small cases: a rotation that a periodic sampler cannot see, a system
whose only unobserved mode is stable, and a scalar doubling map where sparse
samples break the output-dominance property.
"""
import numpy as np

from sbmhe.detectability import (
    falsify_output_dominance, numerical_rank, rolling_window_check, sampled_obs_matrix, unstable_check,
)
from sbmhe.model import GapSequence, NonlinearSystem

# %% Aliasing.  A quarter-turn rotation observed through its first coordinate
# looks identical at every fourth step, so sampling with period 4 sees a
# single direction no matter how long the window.
rot = np.array([[0.0, -1.0], [1.0, 0.0]])
C = np.array([[1.0, 0.0]])
for pattern, T in [((4,), 8), ((1,), 2), ((3, 1), 4)]:
    ok = rolling_window_check(rot, C, GapSequence(pattern), T)
    print(f"rotation, gaps {pattern}, window {T}: rolling-window observable = {ok}")
print("rank with samples at 0, 4, 8:", numerical_rank(sampled_obs_matrix(rot, C, [0, 4, 8])))

# %% Detectability needs only the unstable part.  diag(0.5, 2) measured through
# the unstable coordinate is detectable under any schedule; measuring the
# stable coordinate instead leaves the growing mode unseen.
A = np.diag([0.5, 2.0])
for C in ([[0.0, 1.0]], [[1.0, 0.0]]):
    v = unstable_check(A, C, GapSequence((3,)), 3)
    print(f"\nC = {C}:\n{v.summary()}")

# %% Output dominance.  For x+ = 2x + w with y = x, the output at any step is
# bounded by twice the previous output plus the disturbance.  With a reading
# every step that bound holds; with readings every third step, two doublings
# happen in between and the search finds a violating pair.
doubling = NonlinearSystem(1, 0, 1, 1, f=lambda x, u, w: 2 * x + w, h=lambda x, u, w: x, w_bounds=(0.0, 0.0))
for pattern, t_star in [((1,), 2), ((3,), 4)]:
    cex = falsify_output_dominance(doubling, GapSequence(pattern), 1, a_h=2.0, a_w=1.0,
                                   t_star=t_star, horizon=12, trials=200, seed=0)
    found = "none found" if cex is None else f"violation at t = {cex.t}"
    print(f"\ndoubling map, gaps {pattern}: {found}")
