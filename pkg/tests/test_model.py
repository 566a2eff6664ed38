import numpy as np
import pytest

from scaledsgd import datagen, kernel
from scaledsgd.model import (
    RankDeficient,
    TheoryRegion,
    coherence_g,
    coherence_h,
    coherence_profile,
    condition_number_psd,
    full_grad,
    full_loss,
    grad_g,
    init_gaussian,
    local_dual_norm,
    local_norm,
    mu_coherence,
    refresh_preconditioner,
    sg,
)


def finite_diff_grad(f, X, h=1e-5):
    """Central finite differences of a scalar function of a matrix."""
    G = np.zeros_like(X)
    for a in range(X.shape[0]):
        for b in range(X.shape[1]):
            Xp = X.copy()
            Xm = X.copy()
            Xp[a, b] += h
            Xm[a, b] -= h
            G[a, b] = (f(Xp) - f(Xm)) / (2 * h)
    return G


class TestInitGaussian:
    def test_preconditioner_is_exact_inverse(self):
        m = init_gaussian(3, 3, seed=4)
        assert np.isfinite(m.X).all() and m.X.shape == (3, 3)
        assert np.linalg.norm(m.P @ kernel.gram(m.X) - np.eye(3)) <= 1e-10

    def test_deterministic_per_seed(self):
        a = init_gaussian(50, 4, seed=11)
        b = init_gaussian(50, 4, seed=11)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.P, b.P)

    def test_moments(self):
        m = init_gaussian(1000, 3, sigma=1.0, seed=0)
        assert abs(m.X.mean()) < 0.1
        assert abs(m.X.var() - 1.0) < 0.1

    def test_shortcut_p0(self):
        m = init_gaussian(200, 3, sigma=0.5, seed=0, approx_p0=True)
        assert np.array_equal(m.P, 0.25 * np.eye(3))

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            init_gaussian(2, 3)
        with pytest.raises(ValueError):
            init_gaussian(3, 2, sigma=0.0)


class TestFullLossGrad:
    def test_zero_at_ground_truth(self):
        Z = np.random.default_rng(0).standard_normal((6, 2))
        M = Z @ Z.T
        assert full_loss(Z, M) == pytest.approx(0.0, abs=1e-20)
        assert np.allclose(full_grad(Z, M), 0.0, atol=1e-12)

    def test_zero_factor_gives_frobenius_norm_squared(self):
        M = datagen.gen_low_rank(8, [5.0], seed=1)
        X = np.zeros((8, 2))
        assert full_loss(X, M) == pytest.approx(np.sum(M * M))

    def test_loss_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((5, 2))
        M = datagen.gen_low_rank(5, [2.0, 1.0], seed=3)
        acc = 0.0
        for a in range(5):
            for b in range(5):
                acc += (X[a] @ X[b] - M[a, b]) ** 2
        assert full_loss(X, M) == pytest.approx(acc, rel=1e-12)

    def test_hand_expanded_gradient(self):
        X = np.array([[1.0], [0.0]])
        M = np.zeros((2, 2))
        assert np.allclose(full_grad(X, M), np.array([[4.0], [0.0]]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((5, 2))
        M = datagen.gen_low_rank(5, [2.0, 1.0], seed=5)
        fd = finite_diff_grad(lambda Y: full_loss(Y, M), X)
        G = full_grad(X, M)
        assert np.linalg.norm(G - fd) <= 1e-5 * np.linalg.norm(G)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            full_loss(np.ones((3, 2)), np.ones((4, 4)))


class TestStochasticGradient:
    def test_zero_at_ground_truth(self):
        Z = np.random.default_rng(6).standard_normal((5, 2))
        assert np.allclose(sg(Z, Z @ Z.T, 1, 3), 0.0, atol=1e-12)

    def test_exhaustive_average_equals_full_gradient(self):
        rng = np.random.default_rng(7)
        for d in (3, 5, 8):
            X = rng.standard_normal((d, 2))
            M = rng.standard_normal((d, d))
            M = 0.5 * (M + M.T)
            avg = np.zeros_like(X)
            for a in range(d):
                for b in range(d):
                    avg += sg(X, M, a, b)
            avg /= d * d
            G = full_grad(X, M)
            assert np.linalg.norm(avg - G) <= 1e-12 * max(1.0, np.linalg.norm(G))

    def test_diagonal_sample_hits_single_row_twice(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((4, 3))
        M = rng.standard_normal((4, 4))
        M = 0.5 * (M + M.T)
        out = sg(X, M, 2, 2)
        expect = 2.0 * (2.0 * 16.0) * (X[2] @ X[2] - M[2, 2]) * X[2]
        assert np.allclose(out[2], expect, rtol=1e-12)
        out[2] = 0.0
        assert np.all(out == 0.0)

    def test_index_bounds(self):
        X = np.ones((3, 1))
        with pytest.raises(IndexError):
            sg(X, np.ones((3, 3)), 0, 3)


class TestCoherence:
    def test_identity_rows_full_leverage(self):
        X = np.eye(4)
        assert all(coherence_g(X, k) == pytest.approx(1.0) for k in range(4))

    def test_two_equal_rows_split_leverage(self):
        X = np.array([[1.0], [1.0]])
        assert coherence_g(X, 0) == pytest.approx(0.5)
        assert coherence_g(X, 1) == pytest.approx(0.5)

    def test_leverage_sums_to_rank(self):
        X = np.random.default_rng(9).standard_normal((10, 3))
        prof = coherence_profile(X)
        assert np.sum(prof) == pytest.approx(3.0, abs=1e-10)
        assert np.all(prof >= 0.0) and np.all(prof <= 1.0 + 1e-12)
        assert prof[4] == pytest.approx(coherence_g(X, 4), rel=1e-12)

    def test_row_norms(self):
        assert coherence_h(np.array([[3.0, 4.0], [0.0, 0.0]]), 0) == pytest.approx(25.0)
        assert coherence_h(np.array([[3.0, 4.0], [0.0, 0.0]]), 1) == 0.0

    def test_row_norm_sum_is_frobenius(self):
        X = np.random.default_rng(10).standard_normal((7, 2))
        total = sum(coherence_h(X, k) for k in range(7))
        assert total == pytest.approx(np.linalg.norm(X) ** 2, rel=1e-12)


class TestMuCoherence:
    def test_orthonormal_equal_rows_is_one(self):
        d, r = 8, 2
        # DFT-like frame: orthonormal columns, all rows of norm sqrt(r/d).
        t = np.arange(d)
        Z = np.sqrt(2.0 / d) * np.column_stack(
            [np.cos(2 * np.pi * t / d), np.sin(2 * np.pi * t / d)]
        )
        assert np.allclose(Z.T @ Z, np.eye(r), atol=1e-12)
        assert mu_coherence(Z) == pytest.approx(1.0, rel=1e-10)

    def test_single_coordinate_is_d_over_r(self):
        Z = np.zeros((4, 1))
        Z[0, 0] = 1.0
        assert mu_coherence(Z) == pytest.approx(4.0)

    def test_matches_whitened_row_norm_oracle(self):
        Z = np.random.default_rng(11).standard_normal((20, 3))
        # Independent route: explicit inverse square root via eigendecomposition.
        w, Q = np.linalg.eigh(Z.T @ Z)
        W = Z @ (Q / np.sqrt(w)) @ Q.T
        expected = (20 / 3) * np.max(np.sum(W * W, axis=1))
        assert mu_coherence(Z) == pytest.approx(expected, rel=1e-10)
        assert 1.0 <= mu_coherence(Z) <= 20 / 3


class TestConditionNumber:
    def test_flat_spectrum(self):
        M = datagen.gen_low_rank(30, [2.0, 2.0, 2.0], seed=12)
        assert condition_number_psd(M, 3) == pytest.approx(1.0, abs=1e-12)

    def test_ill_conditioned_spectrum(self):
        M = datagen.gen_low_rank(30, [10.0, 1e-1, 1e-3], seed=13)
        assert condition_number_psd(M, 3) == pytest.approx(1e4, rel=1e-9)

    def test_identity(self):
        assert condition_number_psd(np.eye(5), 5) == pytest.approx(1.0)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            condition_number_psd(datagen.gen_low_rank(6, [1.0], seed=0), 2)


class TestLocalNorms:
    def test_orthonormal_columns_reduce_to_frobenius(self):
        d, r = 9, 3
        X, _ = np.linalg.qr(np.random.default_rng(14).standard_normal((d, r)))
        V = np.random.default_rng(15).standard_normal((d, r))
        fro = np.linalg.norm(V)
        assert local_norm(V, X) == pytest.approx(fro, rel=1e-10)
        assert local_dual_norm(V, X) == pytest.approx(fro, rel=1e-10)

    def test_zero_direction(self):
        X = np.random.default_rng(16).standard_normal((5, 2))
        assert local_norm(np.zeros((5, 2)), X) == 0.0
        assert local_dual_norm(np.zeros((5, 2)), X) == 0.0

    def test_cauchy_schwarz_between_primal_and_dual(self):
        rng = np.random.default_rng(17)
        for _ in range(25):
            X = rng.standard_normal((6, 2))
            V = rng.standard_normal((6, 2))
            lhs = local_norm(V, X) * local_dual_norm(V, X)
            assert lhs >= np.linalg.norm(V) ** 2 * (1 - 1e-10)


class TestGradG:
    def test_square_factor_gradient_vanishes(self):
        X = np.random.default_rng(18).standard_normal((3, 3))
        assert np.allclose(grad_g(X, 1), 0.0, atol=1e-10)

    def test_matches_finite_differences(self):
        X = np.random.default_rng(19).standard_normal((8, 2))
        for k in (0, 3, 7):
            fd = finite_diff_grad(lambda Y: coherence_g(Y, k), X)
            G = grad_g(X, k)
            assert np.linalg.norm(G - fd) <= 1e-5 * max(1.0, np.linalg.norm(G))

    def test_zero_row_gradient_localizes(self):
        X = np.random.default_rng(20).standard_normal((6, 2))
        X[2] = 0.0
        G = grad_g(X, 2)
        fd = finite_diff_grad(lambda Y: coherence_g(Y, 2), X)
        assert np.linalg.norm(G - fd) <= 1e-5 * max(1.0, np.linalg.norm(G))
        off = np.delete(G, 2, axis=0)
        assert np.allclose(off, 0.0, atol=1e-10)


class TestRefresh:
    def test_refresh_is_noop_when_fresh(self):
        m = init_gaussian(12, 3, seed=21)
        before = m.P.copy()
        refresh_preconditioner(m)
        assert np.linalg.norm(m.P - before) <= 1e-12 * np.linalg.norm(before)

    def test_refresh_after_long_chain(self):
        rng = np.random.default_rng(22)
        m = init_gaussian(30, 3, seed=22)
        for _ in range(10_000):
            idx = rng.integers(0, 30)
            new_row = m.X[idx] + 0.1 * rng.standard_normal(3)
            m.P = kernel.smw_add(m.P, new_row)
            m.P = kernel.smw_sub(m.P, m.X[idx])
            m.X[idx] = new_row
            m.smw_calls_since_refresh += 2
        refresh_preconditioner(m)
        prod = m.P @ kernel.gram(m.X)
        assert np.linalg.norm(prod - np.eye(3)) <= 1e-10
        assert m.smw_calls_since_refresh == 0

    def test_refresh_idempotent(self):
        m = init_gaussian(10, 2, seed=23)
        refresh_preconditioner(m)
        first = m.P.copy()
        refresh_preconditioner(m)
        assert np.array_equal(m.P, first)


class TestTheoryRegion:
    def test_derived_constants(self):
        Z = datagen.gen_low_rank_factor(20, [1.0, 0.5, 0.25], seed=24)
        region = TheoryRegion.for_ground_truth(Z, rho=0.1, C=1.0)
        lam_min = np.linalg.eigvalsh(Z.T @ Z)[0]
        assert region.f_max == pytest.approx((0.1 * lam_min) ** 2)
        assert region.zeta == pytest.approx(0.8 / 0.9)
        assert region.L_X == pytest.approx(16.0)
        mu = mu_coherence(Z)
        assert region.g_max == pytest.approx(16.0 / 0.64 * mu * 3 / 20)

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            TheoryRegion(rho=0.6, f_max=1, g_max=1, zeta=0.5, C=1, L_X=16)
        with pytest.raises(ValueError):
            TheoryRegion(rho=0.1, f_max=1, g_max=1, zeta=0.5, C=1, L_X=5)
