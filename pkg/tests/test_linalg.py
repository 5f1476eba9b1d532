import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from latentmoe import linalg
from latentmoe.errors import ArgumentError, NotPositiveDefiniteError

SLOW = settings(max_examples=40, deadline=None)


def rand(rng, *shape):
    return rng.standard_normal(shape)


@st.composite
def matrices(draw, max_dim=24):
    p = draw(st.integers(1, max_dim))
    c = draw(st.integers(1, max_dim))
    seed = draw(st.integers(0, 2**31 - 1))
    scale = draw(st.sampled_from([1e-3, 1.0, 1e3]))
    return scale * np.random.default_rng(seed).standard_normal((p, c))


# --- svd -------------------------------------------------------------------


def test_svd_identity():
    f = linalg.svd(np.eye(3))
    np.testing.assert_allclose(f.s, [1, 1, 1], atol=1e-15)


def test_svd_diagonal_gives_signed_permutations():
    f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(f.s, [3, 2, 1], atol=1e-15)
    for q in (f.u, f.vt):
        assert np.all(np.isin(np.round(np.abs(q), 12), [0.0, 1.0]))
        np.testing.assert_allclose(np.abs(q).sum(axis=0), 1.0)


def test_svd_matches_frozen_jacobi_values():
    m = np.array([[4.0, 0, 3], [2, 1, -1], [0, 5, 2], [1, 1, 1]])
    # computed once with oracles.jacobi_svd
    expected = [6.106300276927999, 4.587495299956198, 2.160551735290977]
    np.testing.assert_allclose(linalg.svd(m).s, expected, rtol=1e-13)
    np.testing.assert_allclose(oracles.singular_values(m), expected, rtol=1e-13)


def test_svd_random_6x4_reconstructs():
    m = rand(np.random.default_rng(0), 6, 4)
    f = linalg.svd(m)
    assert np.linalg.norm(f.reconstruct() - m) <= 1e-10 * np.linalg.norm(m)


def test_svd_sign_convention():
    m = rand(np.random.default_rng(1), 7, 5)
    f = linalg.svd(m)
    idx = np.argmax(np.abs(f.u), axis=0)
    assert np.all(f.u[idx, np.arange(f.u.shape[1])] >= 0)
    f2 = linalg.svd(m.copy())
    assert np.array_equal(f.u, f2.u) and np.array_equal(f.vt, f2.vt)


def test_svd_rejects_nan():
    with pytest.raises(ArgumentError):
        linalg.svd(np.array([[1.0, np.nan]]))


@SLOW
@given(matrices(40))
def test_svd_invariants(m):
    f = linalg.svd(m)
    q = min(m.shape)
    assert f.u.shape == (m.shape[0], q) and f.vt.shape == (q, m.shape[1])
    assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)
    norm = np.linalg.norm(m)
    assert np.linalg.norm(f.reconstruct() - m) <= 1e-10 * norm
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(q), atol=1e-10)
    np.testing.assert_allclose(f.vt @ f.vt.T, np.eye(q), atol=1e-10)


@SLOW
@given(matrices(12))
def test_svd_values_agree_with_jacobi(m):
    np.testing.assert_allclose(linalg.svd(m).s, oracles.singular_values(m), rtol=1e-9, atol=1e-12 * np.abs(m).max())


# --- truncate / low rank -----------------------------------------------------


def test_truncate_full_rank_is_exact():
    d = np.diag([3.0, 2.0, 1.0])
    np.testing.assert_allclose(linalg.truncate(linalg.svd(d), 3).reconstruct(), d, atol=1e-12)


def test_truncate_rank_one_residual():
    d = np.diag([3.0, 2.0, 1.0])
    t = linalg.truncate(linalg.svd(d), 1)
    assert list(t.s) == [3.0]
    assert np.sum((d - t.reconstruct()) ** 2) == pytest.approx(5.0, abs=1e-12)


def test_truncate_rank_two_matrix():
    rng = np.random.default_rng(2)
    w = rand(rng, 4, 2) @ rand(rng, 2, 4)
    t = linalg.truncate(linalg.svd(w), 2)
    assert np.linalg.norm(t.reconstruct() - w) <= 1e-10 * np.linalg.norm(w)


@pytest.mark.parametrize("m", [0, 4, -1])
def test_truncate_rejects_bad_rank(m):
    with pytest.raises(ArgumentError):
        linalg.truncate(linalg.svd(np.eye(3)), m)


def test_low_rank_full_rank_returns_input():
    w = rand(np.random.default_rng(3), 5, 7)
    np.testing.assert_allclose(linalg.low_rank_approx(w, 5), w, atol=1e-10)


def test_low_rank_recovers_outer_product():
    rng = np.random.default_rng(4)
    w = np.outer(rand(rng, 6), rand(rng, 4))
    np.testing.assert_allclose(linalg.low_rank_approx(w, 1), w, atol=1e-10)


def test_low_rank_error_matches_jacobi_tail():
    w = rand(np.random.default_rng(5), 8, 5)
    approx = linalg.low_rank_approx(w, 3)
    err2 = np.sum((w - approx) ** 2)
    assert err2 == pytest.approx(oracles.tail_energy(oracles.singular_values(w), 3), rel=1e-8)
    assert linalg.matrix_rank(approx) <= 3


def test_truncated_svd_beats_random_products():
    rng = np.random.default_rng(6)
    for _ in range(5):
        w = rand(rng, 6, 5)
        best = np.linalg.norm(w - linalg.low_rank_approx(w, 2))
        for _ in range(100):
            other = rand(rng, 6, 2) @ rand(rng, 2, 5)
            assert best <= np.linalg.norm(w - other)


# --- balanced split ------------------------------------------------------------


def test_factor_balanced_diag4():
    a, b = linalg.factor_balanced(linalg.svd(np.diag([4.0, 0.0])), 1)
    np.testing.assert_allclose(np.abs(a.ravel()), [2, 0])
    np.testing.assert_allclose(np.abs(b.ravel()), [2, 0])
    np.testing.assert_allclose(a @ b, np.diag([4.0, 0.0]))


def test_factor_balanced_full_reconstructs():
    w = rand(np.random.default_rng(7), 4, 6)
    a, b = linalg.factor_balanced(linalg.svd(w), 4)
    np.testing.assert_allclose(a @ b, w, atol=1e-12)


def test_factor_balanced_stacked_residual():
    w = rand(np.random.default_rng(8), 12, 5)
    a, b = linalg.factor_balanced(linalg.svd(w), 3)
    assert np.sum((w - a @ b) ** 2) == pytest.approx(oracles.tail_energy(oracles.singular_values(w), 3), rel=1e-8)
    # both factors carry the same singular-value weights
    np.testing.assert_allclose(np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=1))


# --- residual energy / rank ----------------------------------------------------------


@pytest.mark.parametrize("s,m,expected", [([3, 2, 1], 1, 5.0), ([3, 2, 1], 3, 0.0), ([], 2, 0.0), ([3, 2, 1], 0, 14.0)])
def test_residual_energy_examples(s, m, expected):
    assert linalg.residual_energy(s, m) == expected


@SLOW
@given(matrices(20), st.integers(1, 20))
def test_residual_energy_is_truncation_error(w, m):
    m = min(m, min(w.shape))
    f = linalg.svd(w)
    err = np.sum((w - linalg.truncate(f, m).reconstruct()) ** 2)
    res = linalg.residual_energy(f.s, m)
    assert err == pytest.approx(res, rel=1e-8, abs=1e-13 * np.sum(w**2))


def test_numerical_rank_threshold_is_relative():
    assert linalg.numerical_rank([1.0, 1e-9, 1e-11]) == 2
    assert linalg.numerical_rank([1e6, 1e-3, 1e-5]) == 2
    assert linalg.numerical_rank([0.0, 0.0]) == 0


# --- cholesky ----------------------------------------------------------------


def test_cholesky_identity():
    np.testing.assert_array_equal(linalg.cholesky(np.eye(4)).l, np.eye(4))


def test_cholesky_hand_example():
    l = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 5.0]])).l  # noqa: E741
    np.testing.assert_allclose(l, [[2, 0], [1, 2]], atol=1e-15)


def test_cholesky_matches_frozen_oracle():
    g = np.array([[4.0, 2, 2], [2, 5, 1], [2, 1, 6]])
    # oracles.cholesky output
    expected = np.array([[2.0, 0, 0], [1.0, 2.0, 0], [1.0, 0.0, 2.23606797749979]])
    np.testing.assert_allclose(oracles.cholesky(g), expected, rtol=1e-14)
    np.testing.assert_allclose(linalg.cholesky(g).l, expected, rtol=1e-14, atol=1e-15)


def test_cholesky_indefinite_raises():
    with pytest.raises(NotPositiveDefiniteError):
        linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_singular_raises():
    x = np.ones((3, 2))
    with pytest.raises(NotPositiveDefiniteError):
        linalg.cholesky(x.T @ x)


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ArgumentError):
        linalg.cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))


@SLOW
@given(matrices(16), st.floats(1e-8, 1.0))
def test_cholesky_succeeds_with_ridge(x, frac):
    g = x.T @ x
    n = g.shape[0]
    lam = frac * np.trace(g) / n
    g = g + lam * np.eye(n)
    l = linalg.cholesky(g).l  # noqa: E741
    assert np.all(np.diag(l) > 0) and np.allclose(l, np.tril(l))
    assert np.linalg.norm(l @ l.T - g) <= 1e-10 * np.linalg.norm(g)


# --- nullspaces --------------------------------------------------------------


def test_nullspace_zero_matrix():
    assert linalg.nullspace_basis(np.zeros((2, 3))).shape == (3, 3)


def test_nullspace_full_rank_square():
    assert linalg.nullspace_basis(rand(np.random.default_rng(9), 4, 4)).shape == (4, 0)


def test_nullspace_of_product():
    rng = np.random.default_rng(10)
    w = rand(rng, 3, 2) @ rand(rng, 2, 5)
    k = linalg.nullspace_basis(w)
    assert k.shape == (5, 3)
    np.testing.assert_allclose(k.T @ k, np.eye(3), atol=1e-12)
    assert np.all(np.linalg.norm(w @ k, axis=0) <= 1e-8)


def test_common_nullspace_zero_copies():
    assert linalg.common_nullspace_dim([np.zeros((2, 7))] * 3) == 7


def test_common_nullspace_independent_rows():
    rng = np.random.default_rng(11)
    ws = [rand(rng, 2, 9), rand(rng, 2, 9)]
    assert linalg.common_nullspace_dim(ws) == 9 - 4 == 9 - oracles.rank(np.vstack(ws))


def test_common_nullspace_shared_b():
    rng = np.random.default_rng(12)
    b = rand(rng, 3, 8)
    ws = [rand(rng, 3, 3) @ b for _ in range(4)]
    assert linalg.common_nullspace_dim(ws) == 8 - 3


def test_common_nullspace_empty_list():
    with pytest.raises(ArgumentError):
        linalg.common_nullspace_dim([])


@SLOW
@given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
def test_common_nullspace_permutation_invariant(g, seed, rnd):
    rng = np.random.default_rng(seed)
    n = 10
    ws = [rand(rng, rng.integers(1, 4), 3) @ rand(rng, 3, n) for _ in range(g)]
    perm = list(ws)
    rnd.shuffle(perm)
    assert linalg.common_nullspace_dim(ws) == linalg.common_nullspace_dim(perm)


@pytest.mark.parametrize("ratio,rank,expected", [(0.8, 10, 8), (0.6, 5, 3), (0.25, 2, 1), (0.01, 3, 1), (1.0, 7, 7), (0.5, 5, 3)])
def test_ratio_to_rank_rounds_half_up(ratio, rank, expected):
    assert linalg.ratio_to_rank(ratio, rank) == expected


@pytest.mark.parametrize("shape", [(9, 4), (4, 9), (7, 7), (40, 5), (6, 1)])
def test_oracle_jacobi_orderings_agree(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    np.testing.assert_allclose(oracles.singular_values(a), oracles.jacobi_svd(a)[1], rtol=1e-12, atol=1e-14)
