import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_kkt
from diffqp.csc import SparseCSC
from diffqp.errors import (
    AlreadyPlaceholder,
    DimensionMismatch,
    NotPlaceholder,
    PositivePivot,
    WrongBlock,
    ZeroPivot,
)
from diffqp.ldl import ldl_factorize, ldl_solve, rank1_modify, rowcol_add, rowcol_delete


def reference(K, sign, eps, placeholder):
    """Dense K + eps*diag(sign) with placeholder rows and columns zeroed."""
    M = K.to_dense() + eps * np.diag(sign)
    M[placeholder, :] = 0.0
    M[:, placeholder] = 0.0
    return M


def reduced_solve(M, placeholder, rhs):
    keep = ~placeholder
    z = np.zeros_like(rhs)
    z[keep] = np.linalg.solve(M[np.ix_(keep, keep)], rhs[keep])
    return z


class TestFactorize:
    def test_scalar(self):
        F = ldl_factorize(SparseCSC.from_dense([[1.0]]), [1])
        np.testing.assert_array_equal(F.L_dense(), [[1.0]])
        np.testing.assert_array_equal(F.D, [1.0])

    def test_diagonal(self):
        F = ldl_factorize(SparseCSC.from_dense(np.diag([2.0, -3.0])), [1, -1])
        np.testing.assert_array_equal(F.L_dense(), np.eye(2))
        np.testing.assert_array_equal(F.D, [2.0, -3.0])

    def test_random_kkt_reconstruction(self, rng):
        K, sign, _ = random_kkt(rng, 5, 5)
        F = ldl_factorize(K, sign, 1e-6)
        M = reference(K, sign, 1e-6, np.zeros(10, dtype=bool))
        assert np.abs(F.reconstruct() - M).max() <= 1e-12 * np.abs(M).max()

    def test_placeholders_are_identity_rows(self, rng):
        K, sign, _ = random_kkt(rng, 4, 6)
        ph = np.zeros(10, dtype=bool)
        ph[[5, 8]] = True
        F = ldl_factorize(K, sign, 1e-6, ph)
        L = F.L_dense()
        for i in (5, 8):
            assert F.D[i] == 1.0
            np.testing.assert_array_equal(L[:, i], np.eye(10)[:, i])
            np.testing.assert_array_equal(L[i, :], np.eye(10)[i, :])
        M = reference(K, sign, 1e-6, ph)
        np.testing.assert_allclose(F.reconstruct(), M, atol=1e-12 * np.abs(M).max())

    def test_quasidefinite_signs(self, rng):
        K, sign, _ = random_kkt(rng, 6, 8)
        F = ldl_factorize(K, sign, 1e-6)
        assert np.all(F.D[:6] > 0) and np.all(F.D[6:] < 0)

    def test_zero_pivot(self):
        K = SparseCSC.from_dense(np.zeros((2, 2)), keep_zeros=True)
        with pytest.raises(ZeroPivot):
            ldl_factorize(K, [1, -1], 0.0)

    def test_bad_sign(self):
        with pytest.raises(DimensionMismatch):
            ldl_factorize(SparseCSC.from_dense(np.eye(2)), [1])


class TestSolve:
    def test_identity(self, rng):
        F = ldl_factorize(SparseCSC.from_dense(np.eye(3)), [1, 1, 1])
        r = rng.standard_normal(3)
        np.testing.assert_array_equal(ldl_solve(F, r), r)

    def test_diagonal(self):
        F = ldl_factorize(SparseCSC.from_dense(np.diag([2.0, -3.0])), [1, -1])
        np.testing.assert_allclose(ldl_solve(F, np.array([2.0, -3.0])), [1.0, 1.0])

    def test_dense_oracle(self, rng):
        for _ in range(10):
            K, sign, _ = random_kkt(rng, 7, 6)
            F = ldl_factorize(K, sign, 1e-6)
            r = rng.standard_normal(13)
            z = ldl_solve(F, r)
            np.testing.assert_allclose(z, np.linalg.solve(reference(K, sign, 1e-6, F.placeholder), r),
                                       rtol=1e-10, atol=1e-10)

    def test_placeholder_entries_zero(self, rng):
        K, sign, _ = random_kkt(rng, 3, 4)
        ph = np.r_[np.zeros(3, bool), True, False, True, False]
        F = ldl_factorize(K, sign, 1e-6, ph)
        r = rng.standard_normal(7)
        r[ph] = 0.0
        z = ldl_solve(F, r)
        assert np.all(z[ph] == 0.0)

    def test_shape(self):
        F = ldl_factorize(SparseCSC.from_dense(np.eye(2)), [1, 1])
        with pytest.raises(DimensionMismatch):
            ldl_solve(F, np.ones(3))


class TestRank1:
    def test_zero_update(self, rng):
        K, sign, _ = random_kkt(rng, 4, 4)
        F = ldl_factorize(K, sign, 1e-6)
        D, L = F.D.copy(), F.L_dense()
        rank1_modify(F, np.zeros(8), +1)
        np.testing.assert_array_equal(F.D, D)
        np.testing.assert_array_equal(F.L_dense(), L)

    def test_update_matches_refactorization(self, rng):
        for _ in range(10):
            K, sign, _ = random_kkt(rng, 5, 6)
            F = ldl_factorize(K, sign, 1e-6)
            w = rng.standard_normal(11) * (rng.random(11) < 0.4)
            rank1_modify(F, w, +1)
            target = reference(K, sign, 1e-6, F.placeholder) + np.outer(w, w)
            G = ldl_factorize(SparseCSC.from_dense(target, keep_zeros=True), sign, 0.0)
            tol = 1e-10 * (1 + w @ w)
            np.testing.assert_allclose(F.reconstruct(), target, atol=tol * np.abs(target).max())
            np.testing.assert_allclose(F.D, G.D, rtol=1e-10, atol=tol)

    def test_update_then_downdate(self, rng):
        K, sign, _ = random_kkt(rng, 6, 6)
        F = ldl_factorize(K, sign, 1e-6)
        D = F.D.copy()
        w = np.zeros(12)
        w[[2, 7, 9]] = rng.standard_normal(3)
        rank1_modify(F, w, +1)
        rank1_modify(F, w, -1)
        np.testing.assert_allclose(F.D, D, rtol=1e-8, atol=1e-8)

    def test_fill_grows_capacity(self):
        F = ldl_factorize(SparseCSC.from_dense(np.eye(4)), [1, 1, 1, 1])
        assert F.nnz_L == 0
        rank1_modify(F, np.ones(4), +1)
        np.testing.assert_allclose(F.reconstruct(), np.eye(4) + np.ones((4, 4)), atol=1e-14)
        assert F.nnz_L == 6
        assert all(F.capacity(j) >= len(F.column(j)[0]) for j in range(4))

    def test_downdate_through_zero(self):
        F = ldl_factorize(SparseCSC.from_dense(np.eye(1)), [1])
        with pytest.raises(ZeroPivot):
            rank1_modify(F, np.ones(1), -1)

    def test_sigma_checked(self):
        F = ldl_factorize(SparseCSC.from_dense(np.eye(2)), [1, 1])
        with pytest.raises(ValueError):
            rank1_modify(F, np.ones(2), 2)


class TestRowColumn:
    def test_isolated_row(self):
        eps = 1e-6
        K = SparseCSC.from_dense(np.diag([2.0, 0.0]), keep_zeros=True)
        F = ldl_factorize(K, [1, -1], eps, [False, True])
        K_eps = SparseCSC.from_dense(np.diag([2.0 + eps, -eps]), keep_zeros=True)
        rowcol_add(F, K_eps, 1)
        assert F.D[1] == pytest.approx(-eps, rel=1e-12)
        assert not F.placeholder[1]

    def test_delete_decoupled_row(self):
        F = ldl_factorize(SparseCSC.from_dense(np.diag([2.0, -3.0])), [1, -1])
        rowcol_delete(F, 1)
        assert F.placeholder[1] and F.D[1] == 1.0 and F.D[0] == 2.0

    def test_add_last_row(self, rng):
        K, sign, _ = random_kkt(rng, 4, 3)
        K_eps = SparseCSC.from_dense(reference(K, sign, 1e-6, np.zeros(7, bool)), keep_zeros=True)
        ph = np.zeros(7, dtype=bool)
        ph[6] = True
        F = ldl_factorize(K, sign, 1e-6, ph)
        D_before = F.D[:6].copy()
        rowcol_add(F, K_eps, 6)
        np.testing.assert_array_equal(F.D[:6], D_before)
        G = ldl_factorize(K, sign, 1e-6)
        assert F.D[6] == pytest.approx(G.D[6], rel=1e-10)

    def test_delete_matches_reduced_factorization(self, rng):
        for _ in range(10):
            K, sign, _ = random_kkt(rng, 8, 5)
            F = ldl_factorize(K, sign, 1e-6)
            i = 8 + int(rng.integers(5))
            rowcol_delete(F, i)
            ph = np.zeros(13, dtype=bool)
            ph[i] = True
            M = reference(K, sign, 1e-6, ph)
            r = rng.standard_normal(13)
            r[i] = 0.0
            np.testing.assert_allclose(ldl_solve(F, r), reduced_solve(M, ph, r), rtol=1e-8, atol=1e-8)

    def test_delete_then_add_round_trip(self, rng):
        K, sign, _ = random_kkt(rng, 6, 9)
        K_eps = SparseCSC.from_dense(K.to_dense() + 1e-6 * np.diag(sign), keep_zeros=True)
        F = ldl_factorize(K, sign, 1e-6)
        G = F.copy()
        r = rng.standard_normal(15)
        for i in (8, 6, 14):
            rowcol_delete(G, i)
            rowcol_add(G, K_eps, i)
        np.testing.assert_allclose(ldl_solve(G, r), ldl_solve(F, r), rtol=1e-8, atol=1e-8)

    def test_errors(self, rng):
        K, sign, _ = random_kkt(rng, 3, 3)
        K_eps = SparseCSC.from_dense(K.to_dense() + 1e-6 * np.diag(sign), keep_zeros=True)
        F = ldl_factorize(K, sign, 1e-6, [False] * 5 + [True])
        with pytest.raises(NotPlaceholder):
            rowcol_add(F, K_eps, 4)
        with pytest.raises(AlreadyPlaceholder):
            rowcol_delete(F, 5)
        with pytest.raises(WrongBlock):
            rowcol_delete(F, 0)

    def test_positive_pivot_on_add(self):
        K = SparseCSC.from_dense(np.diag([1.0, 1.0]))
        F = ldl_factorize(K, [1, -1], 0.0, [False, True])
        with pytest.raises(PositivePivot):
            rowcol_add(F, K, 1)

    def test_flops_counted(self, rng):
        K, sign, _ = random_kkt(rng, 5, 5)
        K_eps = SparseCSC.from_dense(K.to_dense() + 1e-6 * np.diag(sign), keep_zeros=True)
        F = ldl_factorize(K, sign, 1e-6)
        before = F.flops
        assert before > 0
        rowcol_delete(F, 7)
        rowcol_add(F, K_eps, 7)
        assert F.flops > before


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 12), m=st.integers(2, 20),
       ops=st.lists(st.integers(0, 10**6), min_size=1, max_size=12))
def test_random_operation_sequences(seed, n, m, ops):
    """Reconstruction and sign invariants under arbitrary add/delete sequences."""
    rng = np.random.default_rng(seed)
    K, sign, _ = random_kkt(rng, n, m)
    dim = n + m
    K_eps = SparseCSC.from_dense(K.to_dense() + 1e-6 * np.diag(sign), keep_zeros=True)
    ph = np.r_[np.zeros(n, bool), rng.random(m) < 0.5]
    F = ldl_factorize(K, sign, 1e-6, ph)
    for op in ops:
        i = n + op % m
        if F.placeholder[i]:
            rowcol_add(F, K_eps, i)
        else:
            rowcol_delete(F, i)
    M = reference(K, sign, 1e-6, F.placeholder)
    err = np.linalg.norm(F.reconstruct() - M) / np.linalg.norm(M)
    assert err <= 1e-8
    live = ~F.placeholder
    assert np.all(F.D[n:][live[n:]] < 0)
    assert np.all(F.D[F.placeholder] == 1.0)
    assert dim == F.dim
