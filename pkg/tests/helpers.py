"""Small systems shared by several test modules."""
import numpy as np

from oracles import linear_window_lsq
from sbmhe.mhe import EstimatorConfig, make_problem
from sbmhe.model import LinearSystem, NonlinearSystem, linear_as_nonlinear


def scalar_walk():
    """x+ = x + w, y = x."""
    return NonlinearSystem(
        1, 0, 1, 1,
        f=lambda x, u, w: x + w, h=lambda x, u, w: x,
        f_jac=lambda x, u, w: (np.eye(1), np.eye(1)), h_jac=lambda x, u, w: (np.eye(1), np.zeros((1, 1))),
    )


def unit_config(n, q, p, M=5, eta=0.5, **kw):
    return EstimatorConfig(M=M, eta=eta, P2=np.eye(n), Q=np.eye(q), R=np.eye(p), **kw)


def smooth_system(rng, n=2, m=1, q=2, p=1, with_jac=True):
    """x+ = 0.9 tanh(A x) + B u + G w,  y = sin(C x) + H w."""
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    G = rng.normal(size=(n, q))
    C = rng.normal(size=(p, n))
    H = 0.3 * rng.normal(size=(p, q))

    def f(x, u, w):
        return 0.9 * np.tanh(A @ x) + B @ u + G @ w

    def h(x, u, w):
        return np.sin(C @ x) + H @ w

    def f_jac(x, u, w):
        return 0.9 * (1 - np.tanh(A @ x) ** 2)[:, None] * A, G

    def h_jac(x, u, w):
        return np.cos(C @ x)[:, None] * C, H

    if with_jac:
        return NonlinearSystem(n, m, q, p, f, h, f_jac=f_jac, h_jac=h_jac, name="smooth")
    return NonlinearSystem(n, m, q, p, f, h, name="smooth-fd")


def random_linear(rng, n=None, p=None, m=1):
    n = int(rng.integers(1, 5)) if n is None else n
    p = int(rng.integers(1, n + 1)) if p is None else p
    A = rng.normal(size=(n, n))
    A *= 1.05 / max(1e-9, max(abs(np.linalg.eigvals(A))))
    lin = LinearSystem(A, rng.normal(size=(n, m)), rng.normal(size=(p, n)), np.zeros((p, m)))
    return lin, linear_as_nonlinear(lin)


def random_spd(rng, k, floor=0.1):
    X = rng.normal(size=(k, k))
    return X @ X.T + floor * np.eye(k)


def linear_window_case(rng, L=None):
    """Random unconstrained linear window and its least-squares reference ``(x_s, w, x_end)``.

    ``eta`` stays in [0.5, 0.95]: smaller values make the weights span so many
    decades that double precision cannot resolve the optimum to 1e-8.
    """
    lin, sys = random_linear(rng)
    n, p = lin.n, lin.p
    L = int(rng.integers(1, 21)) if L is None else L
    P2, Q, R = random_spd(rng, n, 0.5), random_spd(rng, n, 0.5), random_spd(rng, p, 0.5)
    eta = float(rng.uniform(0.5, 0.95))
    cfg = EstimatorConfig(M=L, eta=eta, P2=P2, Q=Q, R=R)
    U = rng.normal(size=(L, 1))
    meas = {j: rng.normal(size=p) for j in range(L) if rng.random() < 0.5}
    prior = rng.normal(size=n)
    prob = make_problem(sys, cfg, L, prior, U, meas, start=0)
    ref = linear_window_lsq(lin.A, lin.B, lin.C, lin.D, eta, P2, Q, R, prior, U, meas, L)
    return prob, ref


def random_int_case(rng, max_tau=8, hi=3):
    """Integer pair (A, C) with sample times; 30% of the cases hide an unobservable block."""
    n = int(rng.integers(1, 5))
    p = int(rng.integers(1, 3))
    A = rng.integers(-hi, hi + 1, size=(n, n))
    C = rng.integers(-hi, hi + 1, size=(p, n))
    if n > 1 and rng.random() < 0.3:
        k = int(rng.integers(1, n))
        A[k:, :k] = 0
        C[:, k:] = 0
    k = int(rng.integers(1, n + 3))
    taus = sorted(rng.choice(max_tau + 1, size=min(k, max_tau + 1), replace=False).tolist())
    return A, C, taus
