import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_int_case
from oracles import exact_rank, int_obs_rows, k_set_by_cumsum
from sbmhe.detectability import (
    SampleTimes, falsify_output_dominance, is_sample_observable, numerical_rank, rolling_window_check,
    sampled_obs_matrix, spectral_split, unstable_check, window_sample_times,
)
from sbmhe.model import GapSequence, NonlinearSystem

JORDAN = np.array([[1.0, 1.0], [0.0, 1.0]])
ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])


# --- sampled observability matrix ------------------------------------------------

def test_consecutive_times_give_standard_matrix():
    rng = np.random.default_rng(0)
    A, C = rng.normal(size=(3, 3)), rng.normal(size=(1, 3))
    expected = np.vstack([C, C @ A, C @ A @ A])
    np.testing.assert_allclose(sampled_obs_matrix(A, C, [0, 1, 2]), expected, rtol=1e-14)


def test_jordan_rows():
    np.testing.assert_array_equal(sampled_obs_matrix(JORDAN, [[1.0, 0.0]], [0, 2]), [[1, 0], [1, 2]])


def test_single_identity_sample():
    np.testing.assert_array_equal(sampled_obs_matrix(np.diag([3.0, 4.0]), np.eye(2), [0]), np.eye(2))


@pytest.mark.parametrize("taus", [[], [2, 1], [1, 1], [-1, 2]])
def test_sample_times_validation(taus):
    with pytest.raises(ValueError):
        SampleTimes(taus)


def test_dimension_checks():
    with pytest.raises(ValueError):
        sampled_obs_matrix(np.ones((2, 3)), np.ones((1, 3)), [0])
    with pytest.raises(ValueError):
        sampled_obs_matrix(np.eye(2), np.ones((1, 3)), [0])


def test_numerical_rank_ignores_zero_rows_and_row_scale():
    O = np.array([[1e12, 0.0], [0.0, 0.0], [0.0, 1e-12]])
    assert numerical_rank(O) == 2
    assert numerical_rank(np.zeros((3, 2))) == 0
    assert numerical_rank(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1


@pytest.mark.parametrize("taus, expected", [([0], False), ([0, 1], True), ([0, 2], True)])
def test_jordan_observability(taus, expected):
    assert is_sample_observable(JORDAN, [[1.0, 0.0]], taus) is expected


def test_identity_output_always_observable():
    rng = np.random.default_rng(1)
    assert is_sample_observable(rng.normal(size=(3, 3)), np.eye(3), [0, 5, 7])


def test_exact_rank_agreement_on_integer_cases():
    for seed in range(300):
        A, C, taus = random_int_case(np.random.default_rng(seed))
        exact = exact_rank(int_obs_rows(A.tolist(), C.tolist(), taus))
        assert numerical_rank(sampled_obs_matrix(A, C, taus)) == exact, (seed, A, C, taus)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1), extra=st.integers(0, 8))
def test_rank_never_drops_when_times_are_added(seed, extra):
    A, C, taus = random_int_case(np.random.default_rng(seed))
    more = sorted(set(taus) | {extra})
    assert numerical_rank(sampled_obs_matrix(A, C, more)) >= numerical_rank(sampled_obs_matrix(A, C, taus))


# --- rolling windows ------------------------------------------------------------

@settings(max_examples=100)
@given(pattern=st.lists(st.integers(1, 5), min_size=1, max_size=4), extra=st.integers(0, 4), shift=st.integers(1, 30))
def test_window_times_match_enumeration(pattern, extra, shift):
    gaps = GapSequence(tuple(pattern))
    T = gaps.d_max + extra
    t = T + shift
    K1 = k_set_by_cumsum(pattern, 1, t + 1)
    lo = t - T - 1
    assert window_sample_times(gaps, T, t) == [int(j) - lo for j in K1 if lo <= j <= t - 1]


def test_rolling_identity_pair():
    for pattern in [(1,), (2, 3), (4, 1, 2)]:
        gaps = GapSequence(pattern)
        assert rolling_window_check(np.eye(2), np.eye(2), gaps, gaps.d_max)


def test_rotation_aliasing():
    assert not rolling_window_check(ROT90, [[1.0, 0.0]], GapSequence((4,)), 8)
    assert rolling_window_check(ROT90, [[1.0, 0.0]], GapSequence((1,)), 2)


def test_window_shorter_than_gap_rejected():
    with pytest.raises(ValueError):
        rolling_window_check(np.eye(2), np.eye(2), GapSequence((3,)), 2)
    with pytest.raises(ValueError):
        unstable_check(np.eye(2), np.eye(2), GapSequence((3,)), 2)


def _rolling_bruteforce(A, C, pattern, T, periods=5):
    gaps = GapSequence(tuple(pattern))
    K1 = [int(j) for j in k_set_by_cumsum(list(pattern), 1, (T + periods * gaps.period) + 2)]
    for t in range(T + 1, T + periods * gaps.period + 1):
        lo = t - T - 1
        taus = [j - lo for j in K1 if lo <= j <= t - 1]
        if not taus or exact_rank(int_obs_rows(A.tolist(), C.tolist(), taus)) < A.shape[0]:
            return False
    return True


def test_rolling_check_against_exact_bruteforce():
    for seed in range(150):
        rng = np.random.default_rng(seed)
        A, C, _ = random_int_case(rng)
        pattern = tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(1, 4))))
        T = max(pattern) + int(rng.integers(0, 3))
        if T > 8:
            continue
        assert rolling_window_check(A, C, GapSequence(pattern), T) == _rolling_bruteforce(A, C, pattern, T), seed


# --- spectral split --------------------------------------------------------------

def test_split_of_diagonal_system():
    s = spectral_split(np.diag([0.5, 2.0]), [[1.0, 1.0]])
    np.testing.assert_allclose(s.A_s, [[0.5]])
    np.testing.assert_allclose(s.A_us, [[2.0]])
    np.testing.assert_allclose(np.abs(s.C_s), [[1.0]])
    np.testing.assert_allclose(np.abs(s.C_us), [[1.0]])


def test_stable_matrix_has_empty_unstable_block():
    s = spectral_split(np.array([[0.5, 0.3], [-0.2, 0.4]]), [[1.0, 0.0]])
    assert s.n_unstable == 0 and s.n_stable == 2


def test_coupled_split_reassembles():
    A = np.array([[2.0, 1.0], [0.0, 0.5]])
    s = spectral_split(A, [[1.0, 0.0]])
    Tinv = np.linalg.inv(s.transform)
    B = Tinv @ A @ s.transform
    assert abs(B[0, 1]) < 1e-12 and abs(B[1, 0]) < 1e-12
    assert np.max(np.abs(s.reassemble() - A)) < 1e-10


@settings(max_examples=150)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    A = rng.normal(size=(n, n))
    s = spectral_split(A, rng.normal(size=(1, n)))
    assert np.max(np.abs(s.reassemble() - A)) <= 1e-10 * max(1.0, np.max(np.abs(A)))
    both = np.sort_complex(np.concatenate([s.eig_s, s.eig_us]))
    ref = np.sort_complex(np.linalg.eigvals(A))
    assert np.max(np.abs(both - ref)) < 1e-8
    assert np.all(np.abs(s.eig_s) < 1 - s.circle_tol)
    assert np.all(np.abs(s.eig_us) >= 1 - s.circle_tol)


def test_marginal_modes_go_to_unstable_block():
    s = spectral_split(np.diag([1.0, 0.3]), np.eye(2))
    np.testing.assert_allclose(s.eig_us, [1.0])


# --- detectability verdict -------------------------------------------------------

def test_stable_system_is_detectable_for_any_sampling():
    A = np.array([[0.5, 0.3], [-0.2, 0.4]])
    v = unstable_check(A, np.zeros((1, 2)), GapSequence((7,)), 7)
    assert v.detectable and bool(v)
    assert "unstable eigenvalues: none" in v.summary()


def test_sampled_unstable_mode_is_detectable():
    v = unstable_check(np.diag([0.5, 2.0]), [[0.0, 1.0]], GapSequence((3,)), 3)
    assert v.detectable
    assert "detectable: yes" in v.summary()
    assert "unstable eigenvalues: 2" in v.summary()


@pytest.mark.parametrize("pattern", [(1,), (3,), (2, 5)])
def test_unseen_unstable_mode_is_not_detectable(pattern):
    gaps = GapSequence(pattern)
    v = unstable_check(np.diag([0.5, 2.0]), [[1.0, 0.0]], gaps, gaps.d_max)
    assert not v.detectable
    assert "detectable: no" in v.summary()


@settings(max_examples=80)
@given(seed=st.integers(0, 2**32 - 1))
def test_verdict_invariant_under_similarity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    A = rng.normal(size=(n, n)) * 1.2
    C = rng.normal(size=(1, n))
    if rng.random() < 0.5:
        C[0, :] = 0.0  # blind output: verdict false whenever A has an unstable mode
    S = rng.normal(size=(n, n)) + n * np.eye(n)
    gaps = GapSequence(tuple(int(v) for v in rng.integers(1, 4, size=2)))
    T = gaps.d_max + 2
    v1 = unstable_check(A, C, gaps, T)
    v2 = unstable_check(np.linalg.solve(S, A @ S), C @ S, gaps, T)
    assert v1.detectable == v2.detectable


# --- output-dominance falsifier --------------------------------------------------

def doubling(w_box=0.0):
    box = ([-w_box], [w_box])
    return NonlinearSystem(1, 0, 1, 1, f=lambda x, u, w: 2 * x + w, h=lambda x, u, w: x, w_bounds=box)


def test_identical_pairs_never_violate():
    sys = doubling()
    ident = NonlinearSystem(1, 0, 1, 1, f=sys.f, h=sys.h, x_bounds=([0.0], [0.0]), w_bounds=([0.0], [0.0]))
    assert falsify_output_dominance(ident, GapSequence((3,)), 1, 1.0, 1.0, 1, 30, 20, seed=0) is None


def test_doubling_with_unit_gaps_meets_bound():
    # K_1 starts at t = 1, so the first comparison with an earlier sample is at t = 2
    assert falsify_output_dominance(doubling(), GapSequence((1,)), 1, 2.0, 1.0, 2, 25, 50, seed=1) is None


def test_doubling_with_unit_gaps_needs_a_previous_sample():
    ce = falsify_output_dominance(doubling(), GapSequence((1,)), 1, 2.0, 1.0, 1, 25, 5, seed=1)
    assert ce is not None and ce.t == 1


def test_doubling_between_sparse_samples_violates():
    # t_star = 4 starts right after the first sample at 3
    ce = falsify_output_dominance(doubling(), GapSequence((3,)), 1, 2.0, 1.0, 4, 25, 5, seed=2)
    assert ce is not None
    assert ce.dy_norm > ce.bound
    assert ce.t == 5  # 2x at t = 4 meets the bound, 4x at t = 5 exceeds it


def test_falsifier_argument_checks():
    with pytest.raises(ValueError):
        falsify_output_dominance(doubling(), GapSequence((1,)), 1, 0.0, 1.0, 1, 5, 1, seed=0)
    with pytest.raises(ValueError):
        falsify_output_dominance(doubling(), GapSequence((1,)), 1, 1.0, 1.0, 6, 5, 1, seed=0)
