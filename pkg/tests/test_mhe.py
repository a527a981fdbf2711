import bisect
import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import linear_window_case, random_linear, random_spd, scalar_walk, smooth_system, unit_config
from oracles import certificate_holds_on_grid, horizon_bruteforce, linear_window_lsq
from sbmhe.lm import DivergenceError, LMSettings
from sbmhe.mhe import (
    EstimatorConfig, IossCertificate, UnsatisfiableHorizonError, _normal_equations, assemble_residuals,
    cost, current_problem, error_bound, generalized_lambda_max, horizon_factor, init_estimator, make_problem,
    min_horizon, open_loop_predict, rollout, solve, step, warm_start, weight_root,
)
from sbmhe.model import LinearSystem, NonlinearSystem, linear_as_nonlinear


def scalar_problem(measured=True):
    sys = scalar_walk()
    cfg = EstimatorConfig(M=1, eta=0.5, P2=1.0, Q=1.0, R=1.0)
    meas = {0: [0.0]} if measured else {}
    return make_problem(sys, cfg, 1, [0.0], np.zeros((1, 0)), meas, start=0)


# --- cost and residuals -------------------------------------------------------

def test_scalar_cost_by_hand():
    assert cost(scalar_problem(), [1.0], [[2.0]]) == pytest.approx(10.0, rel=1e-15)


def test_scalar_cost_without_measurement():
    assert cost(scalar_problem(measured=False), [1.0], [[2.0]]) == pytest.approx(9.0, rel=1e-15)


def test_scalar_residual_vector():
    r, J = assemble_residuals(scalar_problem(), [1.0], [[2.0]])
    np.testing.assert_allclose(r, [1.0, 2 * math.sqrt(2), 1.0], rtol=1e-15)
    assert r @ r == pytest.approx(10.0, rel=1e-14)
    assert J.shape == (3, 2)


def test_zero_cost_at_consistent_point():
    rng = np.random.default_rng(3)
    sys = smooth_system(rng)
    cfg = unit_config(2, 2, 1)
    x0 = rng.normal(size=2)
    U = rng.normal(size=(6, 1))
    w = np.zeros((6, 2))
    prob0 = make_problem(sys, cfg, 6, x0, U, {}, start=0)
    X = rollout(prob0, x0, w)
    meas = {j: sys.output(X[j], U[j], w[j]) for j in (0, 2, 5)}
    prob = make_problem(sys, cfg, 6, x0, U, meas, start=0)
    assert cost(prob, x0, w) == 0.0


@settings(max_examples=150)
@given(seed=st.integers(0, 2**32 - 1), nonlinear=st.booleans())
def test_residual_norm_matches_cost(seed, nonlinear):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(0, 9))
    if nonlinear:
        sys = smooth_system(rng, n=int(rng.integers(1, 4)), q=int(rng.integers(1, 3)), p=int(rng.integers(1, 3)))
    else:
        _, sys = random_linear(rng)
    cfg = EstimatorConfig(M=max(1, L), eta=float(rng.uniform(0.05, 0.95)), P2=random_spd(rng, sys.n),
                          Q=random_spd(rng, sys.q), R=random_spd(rng, sys.p))
    U = rng.normal(size=(L, sys.m))
    meas = {j: rng.normal(size=sys.p) for j in range(L) if rng.random() < 0.6}
    prob = make_problem(sys, cfg, L, rng.normal(size=sys.n), U, meas, start=0)
    x_s, w = rng.normal(size=sys.n), rng.normal(size=(L, sys.q))
    r, _ = assemble_residuals(prob, x_s, w)
    c = cost(prob, x_s, w)
    assert r @ r == pytest.approx(c, rel=1e-12, abs=1e-300)


def _fd_jacobian(prob, z, h=1e-6):
    def res(v):
        return assemble_residuals(prob, *prob.split(v))[0]

    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((res(z + e) - res(z - e)) / (2 * h))
    return np.column_stack(cols)


@pytest.mark.parametrize("seed", range(5))
def test_propagated_jacobian_matches_differences(seed):
    rng = np.random.default_rng(seed)
    sys = smooth_system(rng, n=3, q=2, p=2)
    cfg = EstimatorConfig(M=7, eta=0.7, P2=random_spd(rng, 3), Q=random_spd(rng, 2), R=random_spd(rng, 2))
    L = 7
    meas = {j: rng.normal(size=2) for j in (0, 3, 4, 6)}
    prob = make_problem(sys, cfg, L, rng.normal(size=3), rng.normal(size=(L, 1)), meas, start=0)
    z = prob.join(rng.normal(size=3), 0.5 * rng.normal(size=(L, 2)))
    _, J = assemble_residuals(prob, *prob.split(z))
    J_fd = _fd_jacobian(prob, z)
    assert np.max(np.abs(J - J_fd)) <= 1e-5 * max(1.0, np.max(np.abs(J)))


def test_finite_difference_fallback_matches_analytic():
    rng = np.random.default_rng(11)
    exact = smooth_system(np.random.default_rng(11), with_jac=True)
    fd = smooth_system(np.random.default_rng(11), with_jac=False)
    cfg = unit_config(2, 2, 1, M=6, eta=0.8)
    U = rng.normal(size=(6, 1))
    meas = {j: rng.normal(size=1) for j in (1, 2, 5)}
    x_s, w = rng.normal(size=2), rng.normal(size=(6, 2))
    _, J1 = assemble_residuals(make_problem(exact, cfg, 6, np.zeros(2), U, meas, start=0), x_s, w)
    _, J2 = assemble_residuals(make_problem(fd, cfg, 6, np.zeros(2), U, meas, start=0), x_s, w)
    np.testing.assert_allclose(J2, J1, atol=1e-6)


def test_bad_jacobian_shape_is_reported():
    sys = NonlinearSystem(1, 0, 1, 1, f=lambda x, u, w: x + w, h=lambda x, u, w: x,
                          f_jac=lambda x, u, w: (np.eye(2), np.eye(1)))
    prob = make_problem(sys, unit_config(1, 1, 1, M=2), 2, [0.0], np.zeros((2, 0)), {1: [1.0]}, start=0)
    with pytest.raises(ValueError):
        assemble_residuals(prob, [0.0], np.zeros((2, 1)))


def test_wrong_decision_size():
    with pytest.raises(ValueError):
        assemble_residuals(scalar_problem(), [1.0, 2.0], [[2.0]])


@settings(max_examples=60)
@given(seed=st.integers(0, 2**32 - 1))
def test_structured_normal_solve_matches_dense(seed):
    rng = np.random.default_rng(seed)
    sys = smooth_system(rng, n=int(rng.integers(1, 4)), q=int(rng.integers(1, 3)), p=int(rng.integers(1, 3)))
    L = int(rng.integers(1, 12))
    cfg = EstimatorConfig(M=L, eta=float(rng.uniform(0.1, 0.95)), P2=random_spd(rng, sys.n),
                          Q=random_spd(rng, sys.q), R=random_spd(rng, sys.p))
    meas = {j: rng.normal(size=sys.p) for j in range(L) if rng.random() < 0.7}
    prob = make_problem(sys, cfg, L, rng.normal(size=sys.n), rng.normal(size=(L, 1)), meas, start=0)
    z = rng.normal(size=prob.n_vars)
    r, N, g = _normal_equations(prob, z)
    _, J = assemble_residuals(prob, *prob.split(z))
    H = J.T @ J
    np.testing.assert_allclose(N.dense(), H, rtol=1e-10, atol=1e-10 * np.abs(H).max())
    np.testing.assert_allclose(g, J.T @ r, rtol=1e-10, atol=1e-10 * max(1.0, np.abs(g).max()))
    shift = rng.uniform(0, 1, size=z.size) * np.diag(H)
    rhs = rng.normal(size=z.size)
    ref = np.linalg.solve(H + np.diag(shift), rhs)
    got = N.solve(shift, rhs)
    assert np.linalg.norm(got - ref) <= 1e-8 * max(1.0, np.linalg.norm(ref))


# --- solver -------------------------------------------------------------------

def test_scalar_optimum_beats_candidate_and_grid():
    prob = scalar_problem()
    sol = solve(prob)
    assert sol.converged
    assert sol.cost < 10.0
    grid = np.linspace(-3, 3, 601)
    best = min(cost(prob, [a], [[b]]) for a in grid[::10] for b in grid[::10])
    assert sol.cost <= best + 1e-12


def test_noise_free_data_recovered_from_true_prior():
    rng = np.random.default_rng(5)
    sys = smooth_system(rng, n=2, q=2, p=2)
    cfg = unit_config(2, 2, 2, M=8, eta=0.6)
    x0 = rng.normal(size=2)
    U = rng.normal(size=(8, 1))
    w = np.zeros((8, 2))
    X = rollout(make_problem(sys, cfg, 8, x0, U, {}, start=0), x0, w)
    meas = {j: sys.output(X[j], U[j], w[j]) for j in range(0, 8, 2)}
    sol = solve(make_problem(sys, cfg, 8, x0, U, meas, start=0))
    assert sol.cost <= 1e-18
    np.testing.assert_allclose(sol.x_s, x0, atol=1e-9)
    np.testing.assert_allclose(sol.disturbances, 0.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_linear_window_matches_direct_least_squares(seed):
    prob, (x_ref, w_ref, xt_ref) = linear_window_case(np.random.default_rng(100 + seed))
    sol = solve(prob)
    z = prob.join(sol.x_s, sol.disturbances)
    z_ref = prob.join(x_ref, w_ref)
    assert np.linalg.norm(z - z_ref) <= 1e-8 * max(1.0, np.linalg.norm(z_ref))
    assert np.linalg.norm(sol.estimate - xt_ref) <= 1e-8 * max(1.0, np.linalg.norm(xt_ref))


def test_optimum_dominates_true_window():
    rng = np.random.default_rng(8)
    sys = smooth_system(rng, n=2, q=2, p=1)
    cfg = unit_config(2, 2, 1, M=10, eta=0.8)
    x0 = rng.normal(size=2)
    U = rng.normal(size=(10, 1))
    w = 0.1 * rng.normal(size=(10, 2))
    X = rollout(make_problem(sys, cfg, 10, x0, U, {}, start=0), x0, w)
    meas = {j: sys.output(X[j], U[j], w[j]) + 0.05 * rng.normal(size=1) for j in range(10)}
    prob = make_problem(sys, cfg, 10, x0 + 0.3, U, meas, start=0)
    assert solve(prob).cost <= cost(prob, x0, w)


def test_iteration_limit_is_reported():
    rng = np.random.default_rng(2)
    sys = smooth_system(rng, n=2, q=2, p=1)
    cfg = unit_config(2, 2, 1, M=5, eta=0.8, solver=LMSettings(max_iter=1))
    meas = {j: [3.0] for j in range(5)}
    sol = solve(make_problem(sys, cfg, 5, [2.0, -2.0], np.zeros((5, 1)), meas, start=0))
    assert not sol.converged
    assert sol.status == "maxiter"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_rollout_raises():
    sys = NonlinearSystem(1, 0, 1, 1, f=lambda x, u, w: 1e200 * x ** 2 + w, h=lambda x, u, w: x)
    prob = make_problem(sys, unit_config(1, 1, 1, M=3), 3, [1e100], np.zeros((3, 0)), {2: [0.0]}, start=0)
    with pytest.raises(DivergenceError):
        solve(prob)


def test_projected_mode_keeps_disturbances_in_box():
    base = scalar_walk()
    sys = NonlinearSystem(1, 0, 1, 1, base.f, base.h, base.f_jac, base.h_jac,
                          x_bounds=([-10.0], [10.0]), w_bounds=([-0.01], [0.01]))
    cfg = unit_config(1, 1, 1, M=4, eta=0.9, constraints="projected")
    meas = {j: [float(j)] for j in range(4)}
    sol = solve(make_problem(sys, cfg, 4, [0.0], np.zeros((4, 0)), meas, start=0))
    assert np.all(np.abs(sol.disturbances) <= 0.01 + 1e-15)
    assert sol.feasible


def test_unconstrained_mode_reports_infeasibility():
    base = scalar_walk()
    sys = NonlinearSystem(1, 0, 1, 1, base.f, base.h, base.f_jac, base.h_jac, w_bounds=([-0.01], [0.01]))
    cfg = unit_config(1, 1, 1, M=4, eta=0.9)
    meas = {j: [float(j)] for j in range(4)}
    sol = solve(make_problem(sys, cfg, 4, [0.0], np.zeros((4, 0)), meas, start=0))
    assert not sol.feasible


# --- configuration -------------------------------------------------------------

def test_semidefinite_output_weight_accepted():
    cfg = EstimatorConfig(M=2, eta=0.5, P2=np.eye(2), Q=np.eye(2), R=np.diag([1.0, 0.0]))
    S = weight_root(cfg.R)
    np.testing.assert_allclose(S.T @ S, cfg.R, atol=1e-15)


@pytest.mark.parametrize("kw", [
    dict(eta=1.0), dict(eta=-0.1), dict(M=0),
    dict(P2=np.array([[1.0, 0.5], [0.0, 1.0]])),
    dict(P2=np.diag([1.0, 0.0])), dict(Q=np.diag([1.0, 0.0])), dict(R=np.diag([1.0, -1.0])),
    dict(constraints="barrier"),
])
def test_invalid_estimator_config(kw):
    base = dict(M=2, eta=0.5, P2=np.eye(2), Q=np.eye(2), R=np.eye(2))
    base.update(kw)
    with pytest.raises(ValueError):
        EstimatorConfig(**base)


def test_config_dimension_mismatch():
    with pytest.raises(ValueError):
        make_problem(scalar_walk(), unit_config(2, 1, 1), 1, [0.0], np.zeros((1, 0)), {}, start=0)


# --- estimator loop -------------------------------------------------------------

def test_open_loop_predict():
    ident = linear_as_nonlinear(LinearSystem.from_matrices(np.eye(2), [[1.0, 0.0]]))
    np.testing.assert_array_equal(open_loop_predict([1.0, 2.0], np.zeros(0), ident), [1.0, 2.0])
    lin = LinearSystem([[1.0, 1.0], [0.0, 0.5]], [[1.0], [2.0]], [[1.0, 0.0]], [[0.0]])
    sys = linear_as_nonlinear(lin)
    np.testing.assert_allclose(open_loop_predict([1.0, 2.0], [3.0], sys), lin.A @ [1, 2] + lin.B @ [3.0])


def _drive(sys, cfg, x_hat0, Y, times, U, until):
    state = init_estimator(sys, cfg, x_hat0)
    for t in range(1, until + 1):
        new = {t - 1: Y[t - 1]} if (t - 1) in times else None
        step(state, U[t - 1], new)
    return state


def test_initial_estimate_is_returned_at_t0():
    state = init_estimator(scalar_walk(), unit_config(1, 1, 1), [4.0])
    np.testing.assert_array_equal(state.estimate, [4.0])
    assert current_problem(state).length == 0


def test_fast_path_between_samples():
    rng = np.random.default_rng(21)
    lin, sys = random_linear(rng, n=3, p=1)
    cfg = unit_config(3, 3, 1, M=4, eta=0.7)
    U = rng.normal(size=(40, 1))
    Y = rng.normal(size=(40, 1))
    times = set(range(0, 40, 3))
    state = init_estimator(sys, cfg, np.zeros(3))
    for t in range(1, 31):
        prev = state.estimate.copy()
        step(state, U[t - 1], {t - 1: Y[t - 1]} if (t - 1) in times else None)
        rec = state.records[-1]
        if (t - 1) in times:
            assert rec.solved
        else:
            assert not rec.solved
            np.testing.assert_allclose(state.estimate, open_loop_predict(prev, U[t - 1], sys), rtol=1e-15)
            full = solve(current_problem(state))
            np.testing.assert_allclose(full.estimate, state.estimate, atol=1e-6)


def test_solved_step_matches_batch_oracle():
    rng = np.random.default_rng(4)
    lin, sys = random_linear(rng, n=2, p=1)
    cfg = unit_config(2, 2, 1, M=5, eta=0.6)
    U = rng.normal(size=(20, 1))
    Y = rng.normal(size=(20, 1))
    times = {0, 1, 3, 4, 6, 8, 9, 11, 12}
    state = _drive(sys, cfg, np.zeros(2), Y, times, U, 12)
    s = state.records[-1]
    assert s.solved
    prob = current_problem(state)
    meas = {j - prob.start: Y[j] for j in times if prob.start <= j < 12}
    _, _, xt = linear_window_lsq(lin.A, lin.B, lin.C, lin.D, cfg.eta, cfg.P2, cfg.Q, cfg.R,
                                 state.estimates[prob.start], U[prob.start:12], meas, prob.length)
    np.testing.assert_allclose(state.estimate, xt, rtol=1e-8, atol=1e-10)


def test_measurement_from_the_future_rejected():
    state = init_estimator(scalar_walk(), unit_config(1, 1, 1), [0.0])
    with pytest.raises(ValueError):
        step(state, None, {1: [0.0]})


def test_first_warm_start_is_prior_and_zero():
    state = init_estimator(scalar_walk(), unit_config(1, 1, 1), [2.5])
    state.measurements[0] = np.array([1.0])
    state._times.append(0)
    state.inputs.append(np.zeros(0))
    state.t = 1
    prob = current_problem(state)
    x_s, w = warm_start(state, prob)
    np.testing.assert_array_equal(x_s, [2.5])
    np.testing.assert_array_equal(w, np.zeros((1, 1)))


def test_identical_window_needs_no_iterations():
    rng = np.random.default_rng(6)
    prob, _ = linear_window_case(rng, L=8)
    sol = solve(prob)
    again = solve(prob, (sol.x_s, sol.disturbances))
    assert again.iterations == 0
    np.testing.assert_allclose(again.estimate, sol.estimate, rtol=0, atol=0)


def test_warm_start_usually_beats_cold_start():
    # converging estimator: noise-free data, wrong initial estimate, window sliding by one step
    wins = trials = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lin, sys = random_linear(rng, n=int(rng.integers(1, 4)), p=1)
        n = lin.n
        M = int(rng.integers(2, 7))
        cfg = unit_config(n, n, 1, M=M, eta=float(rng.uniform(0.4, 0.9)))
        T = M + 8
        x0 = rng.normal(size=n)
        U = rng.normal(size=(T, 1))
        Y = np.empty((T, 1))
        x = x0
        for t in range(T):
            Y[t] = lin.C @ x
            x = lin.A @ x + lin.B @ U[t]
        state = _drive(sys, cfg, x0 + rng.normal(size=n), Y, set(range(T)), U, M - 1)
        for t in range(M, M + 6):
            trial = copy.deepcopy(state)
            trial.measurements[t - 1] = Y[t - 1]
            bisect.insort(trial._times, t - 1)
            trial.inputs.append(U[t - 1])
            trial.t = t
            prob = current_problem(trial)
            warm = cost(prob, *warm_start(trial, prob))
            cold = cost(prob, prob.prior, np.zeros((prob.length, sys.q)))
            trials += 1
            wins += warm <= cold
            step(state, U[t - 1], {t - 1: Y[t - 1]})
    assert wins / trials >= 0.9


# --- horizon design -------------------------------------------------------------

def _cert(P1, P2, eta, Q=None, R=None):
    n = np.atleast_2d(P1).shape[0]
    return IossCertificate(P1=P1, P2=P2, Q=np.eye(n) if Q is None else Q, R=np.eye(1) if R is None else R, eta=eta)


@pytest.mark.parametrize("eta, d_max, expected", [(0.5, 1, 3), (0.5, 5, 5), (0.0, 2, 2), (0.0, 0, 1)])
def test_min_horizon_examples(eta, d_max, expected):
    assert min_horizon(_cert(np.eye(2), np.eye(2), eta), d_max) == expected


def test_min_horizon_identity_factor():
    cert = _cert(np.eye(2), np.eye(2), 0.5)
    assert horizon_factor(cert, 2) == 1.0
    assert horizon_factor(cert, 3) == 0.5


@settings(max_examples=200)
@given(seed=st.integers(0, 2**32 - 1), eta=st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99]),
       d_max=st.integers(0, 30))
def test_min_horizon_bruteforce(seed, eta, d_max):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    cert = _cert(random_spd(rng, n), random_spd(rng, n), eta)
    lam = generalized_lambda_max(cert.P2, cert.P1)
    M = min_horizon(cert, d_max)
    assert M == horizon_bruteforce(lam, eta, d_max)
    assert 4 * lam ** 2 * eta ** M < 1
    assert M == max(1, d_max) or 4 * lam ** 2 * eta ** (M - 1) >= 1


def test_generalized_eigenvalue_against_scipy_free_formula():
    P1 = np.diag([2.0, 4.0])
    P2 = np.diag([1.0, 12.0])
    assert generalized_lambda_max(P2, P1) == pytest.approx(3.0)


def test_unsatisfiable_horizon_guard():
    cert = _cert(np.eye(1), 1e6 * np.eye(1), 0.999)
    with pytest.raises(UnsatisfiableHorizonError):
        min_horizon(cert, 1, max_horizon=50)


def test_invalid_certificate():
    with pytest.raises(ValueError):
        _cert(np.eye(2), np.diag([1.0, 0.0]), 0.5)
    with pytest.raises(ValueError):
        _cert(np.eye(2), np.eye(2), 1.0)


def test_scalar_certificate_and_its_horizon():
    # x+ = 0.5 x + w certified with P1 = 1/3, P2 = Q = 1, eta = 1/2
    assert certificate_holds_on_grid(0.5, 1 / 3, 1.0, 1.0, 0.5)
    # the supremum of the gain is 2, so P1 = 0.6 must fail (already at t = 2 with unit steps)
    assert not certificate_holds_on_grid(0.5, 0.6, 1.0, 1.0, 0.5)
    cert = IossCertificate(P1=1 / 3, P2=1.0, Q=1.0, R=1.0, eta=0.5)
    assert min_horizon(cert, 3) == 6


def test_error_bound_examples():
    cert = IossCertificate(P1=1.0, P2=1.0, Q=1.0, R=1.0, eta=0.25)
    for t in range(6):
        assert error_bound(cert, 2, 0.0, np.zeros(t), t) == 0.0
    assert error_bound(cert, 2, 1.0, np.zeros(4), 4) == pytest.approx(0.5, rel=1e-12)
    assert error_bound(cert, 2, 0.0, [1.0, 0.0, 0.0, 0.0], 4) == pytest.approx(2 * 0.5 ** 1.5, rel=1e-12)


def test_error_bound_preconditions():
    cert = IossCertificate(P1=1.0, P2=1.0, Q=1.0, R=1.0, eta=0.5)
    with pytest.raises(UnsatisfiableHorizonError):
        error_bound(cert, 2, 1.0, [], 0)
    with pytest.raises(ValueError):
        error_bound(cert, 3, 1.0, [1.0], 4)
