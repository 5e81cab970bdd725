from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from kronocov.bounds import (
    BoundParams,
    fit_quadratic,
    gs_toeplitz_basis,
    kron_spectrum,
    min_separation_rank,
    opnorm_coverage,
    opnorm_growth_experiment,
    oracle_inequality_check,
    permuted_error_norm,
    thm3_rate,
    toeplitz_spectrum_bounds,
    variational_bound,
)
from kronocov.estimators import prls, scm
from kronocov.matcore import permute_R, vec
from kronocov.synthgen import (
    RngSeed,
    Var1Spec,
    random_kp_sum_covariance,
    random_stable_matrix,
    sample_gaussian,
)

from conftest import loop_permute, random_spd


class TestPermutedErrorNorm:
    def test_zero(self, rng):
        S = random_spd(rng, 4)
        assert permuted_error_norm(S, S, 2, 2) == 0

    def test_rank_one(self, rng):
        A, B = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
        Sigma0 = random_spd(rng, 6)
        val = permuted_error_norm(Sigma0 + np.kron(A, B), Sigma0, 2, 3)
        assert val == pytest.approx(np.linalg.norm(A) * np.linalg.norm(B), rel=1e-10)

    def test_svd_oracle(self, rng):
        D = rng.standard_normal((4, 4))
        val = permuted_error_norm(D, np.zeros((4, 4)), 2, 2)
        assert val == pytest.approx(np.linalg.svd(loop_permute(D, 2, 2), compute_uv=False)[0])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            permuted_error_norm(np.eye(4), np.eye(6), 2, 2)


class TestThm3Rate:
    def test_vanishes(self):
        params = BoundParams(C0=1.0)
        rates = [thm3_rate(params, 3, 3, n) for n in (10, 10**4, 10**8)]
        assert rates[0] > rates[1] > rates[2]
        assert rates[2] < 0.05 * rates[1]

    def test_branch_continuity(self):
        # Pick n so that (p^2 + q^2 + log n)/n is 1 to machine precision.
        from scipy.optimize import brentq

        p = q = 2
        n_star = brentq(lambda n: (8 + math.log(n)) / n - 1, 8, 20)
        params = BoundParams(C0=1.0)
        x = (8 + math.log(n_star)) / n_star
        assert x == pytest.approx(1.0)
        assert max(x, math.sqrt(x)) == pytest.approx(x)

    def test_constants(self):
        assert BoundParams.C1 == pytest.approx(4 * math.e / math.sqrt(6 * math.pi))
        assert round(BoundParams.C1, 4) == 2.5044
        assert round(BoundParams.C2, 4) == 3.8442

    def test_inadmissible(self):
        with pytest.raises(ValueError):
            thm3_rate(BoundParams(C0=1.0, t=5.0), 2, 2, 10)

    @pytest.mark.parametrize("kwargs", [{"C0": 0.0}, {"C0": 1.0, "eps_prime": 0.5}, {"C0": 1.0, "t": 0.5}])
    def test_param_validation(self, kwargs):
        with pytest.raises(ValueError):
            BoundParams(**kwargs)

    def test_coverage_conservative(self):
        p = q = 2
        Sigma0, _ = random_kp_sum_covariance(p, q, 1, RngSeed(5))
        params = BoundParams(C0=float(np.linalg.norm(Sigma0, 2)))
        observed, nominal = opnorm_coverage(Sigma0, p, q, 20, params, 500, RngSeed(6))
        assert observed >= nominal


class TestOpnormGrowth:
    def test_consistency(self):
        res = opnorm_growth_experiment(2, 10**6, [2], 3, RngSeed(1))
        assert res.means[0] < 0.05

    def test_monotone_trend(self):
        res = opnorm_growth_experiment(5, 10, list(range(5, 55, 5)), 20, RngSeed(2))
        assert spearmanr(res.p_grid, res.means).correlation >= 0.95

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            opnorm_growth_experiment(5, 10, [], 5, RngSeed(0))

    def test_quadratic_fit_exact(self):
        x = np.arange(1, 6)
        a, b, r2 = fit_quadratic(x, 3 * x**2 + 2)
        assert (a, b, r2) == pytest.approx((3, 2, 1))


class TestOracle:
    def test_perfect_estimate(self, rng):
        Sigma0 = random_spd(rng, 4)
        chk = oracle_inequality_check(Sigma0, Sigma0, 0.3, 2, 2)
        assert chk.lhs == 0 and chk.holds

    def test_boundary_hypothesis(self, rng):
        Sigma0 = random_spd(rng, 9)
        S = Sigma0 + 0.1 * random_spd(rng, 9)
        lam = 2 * np.linalg.svd(permute_R(S - Sigma0, 3, 3), compute_uv=False)[0]
        chk = oracle_inequality_check(prls(S, lam, 3, 3).covariance, Sigma0, lam, 3, 3, S_hat=S)
        assert chk.hypothesis_ok is True

    def test_rhs_formula(self, rng):
        Sigma0 = random_spd(rng, 4)
        s2 = np.linalg.svd(permute_R(Sigma0, 2, 2), compute_uv=False) ** 2
        chk = oracle_inequality_check(np.zeros((4, 4)), Sigma0, 1.0, 2, 2)
        c = (1 + math.sqrt(2)) ** 2 / 4
        expected = [s2[r:].sum() + c * r for r in range(5)]
        np.testing.assert_allclose(chk.rhs_per_r, expected)

    def test_random_trials(self):
        p = q = 5
        Sigma0, _ = random_kp_sum_covariance(p, q, 2, RngSeed(21))
        for n in (25, 100):
            for k in range(20):
                S = scm(sample_gaussian(Sigma0, n, RngSeed(21, (n, k)), p=p, q=q))
                lam = 2 * permuted_error_norm(S, Sigma0, p, q)
                chk = oracle_inequality_check(prls(S, lam, p, q).covariance, Sigma0, lam, p, q, S_hat=S)
                assert chk.holds and chk.hypothesis_ok


class TestKronSpectrum:
    def test_kronecker(self, rng):
        A, B = random_spd(rng, 2), random_spd(rng, 3)
        s = kron_spectrum(np.kron(A, B), 2, 3)
        assert s.size == 4
        assert s[0] == pytest.approx(np.linalg.norm(A) * np.linalg.norm(B))
        assert np.all(s[1:] <= 1e-10 * s[0])

    def test_orthogonal_terms(self):
        E = [np.diag([1.0, 0]), np.diag([0, 1.0]), np.array([[0, 1.0], [1.0, 0]])]
        F = [np.diag([1.0, 0, 0]), np.diag([0, 1.0, 0]), np.diag([0, 0, 1.0])]
        Sigma = sum(w * np.kron(a, b) for w, a, b in zip((3.0, 2.0, 1.0), E, F))
        s = kron_spectrum(Sigma, 2, 3)
        assert np.sum(s > 1e-10) == 3

    def test_energy(self, rng):
        S = random_spd(rng, 12)
        assert np.sum(kron_spectrum(S, 3, 4) ** 2) == pytest.approx(np.sum(S**2), rel=1e-10)


class TestVariational:
    def test_equality_at_svd_basis(self, rng):
        R0 = rng.standard_normal((9, 16))
        _, s, Vt = np.linalg.svd(R0)
        for k in range(9):
            Vk = Vt[:k].T
            val = variational_bound(R0, Vk @ Vk.T)
            assert abs(val - s[k] ** 2) <= 1e-8 * s[0] ** 2

    def test_zero_projector(self, rng):
        R0 = rng.standard_normal((4, 9))
        assert variational_bound(R0, np.zeros((9, 9))) == pytest.approx(np.linalg.norm(R0, 2) ** 2)

    def test_random_projectors(self, rng):
        R0 = rng.standard_normal((6, 9))
        s = np.linalg.svd(R0, compute_uv=False)
        for _ in range(100):
            k = rng.integers(0, 6)
            Q, _ = np.linalg.qr(rng.standard_normal((9, 9)))
            P = Q[:, :k] @ Q[:, :k].T
            assert variational_bound(R0, P) >= s[k] ** 2 - 1e-10

    def test_rejects_non_projector(self, rng):
        with pytest.raises(ValueError):
            variational_bound(rng.standard_normal((2, 4)), 2 * np.eye(4))


class TestGramSchmidt:
    def test_all_equal(self, rng):
        A = rng.standard_normal((3, 3))
        basis = gs_toeplitz_basis({0: A, 1: A, -1: A})
        assert basis.vectors.shape[0] == 1

    def test_hand_example(self):
        S1 = np.array([[0.0, 1.0], [0.0, 0.0]])
        basis = gs_toeplitz_basis({0: np.eye(2), 1: S1, -1: S1.T})
        V = basis.vectors
        assert V.shape[0] == 3
        G = V @ V.T
        assert np.max(np.abs(G - np.eye(3))) <= 1e-10
        # Hand Gram-Schmidt: the three inputs are already orthogonal.
        np.testing.assert_allclose(V[0], vec(np.eye(2)) / math.sqrt(2))
        np.testing.assert_allclose(V[1], vec(S1))
        np.testing.assert_allclose(V[2], vec(S1.T))

    def test_span(self):
        Phi = random_stable_matrix(3, 0.9, RngSeed(4))
        from kronocov.synthgen import var1_lag_covariances

        lags = var1_lag_covariances(Var1Spec(Phi, 3))
        V = gs_toeplitz_basis(lags).vectors
        for S in lags.values():
            x = vec(S)
            assert np.linalg.norm(x - V.T @ (V @ x)) <= 1e-8

    def test_order(self):
        lags = {t: np.diag([1.0, float(t)]) + (t > 0) * np.eye(2)[::-1] for t in (-2, -1, 0, 1, 2)}
        assert gs_toeplitz_basis(lags).taus[:3] == (0, 1, -1)


class TestToeplitzBounds:
    def test_white_process(self):
        rep = toeplitz_spectrum_bounds(Var1Spec(np.zeros((3, 3)), 4))
        assert rep.exact[1] <= 1e-20
        assert np.all(rep.gs_tail[1:] == 0)
        for name in ("frob_opt", "frob_gs"):
            assert np.all(rep.curves()[name][1:] <= 1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_ordering(self, seed):
        Phi = random_stable_matrix(6, 0.9, RngSeed(seed))
        rep = toeplitz_spectrum_bounds(Var1Spec(Phi, 4), 5, 6)
        c = rep.curves()
        assert np.all(c["exact"] <= c["frob_opt"] + 1e-8)
        assert np.all(c["frob_opt"] <= c["frob_gs"] + 1e-8)
        assert np.all(c["frob_gs"] <= c["gs_tail"] + 1e-8)

    def test_odd_k_row_subtraction(self):
        Phi = random_stable_matrix(4, 0.8, RngSeed(1))
        spec = Var1Spec(Phi, 3)
        from kronocov.synthgen import var1_lag_covariances

        lags = var1_lag_covariances(spec)
        rep = toeplitz_spectrum_bounds(spec)
        p = 4
        for kp in range(3):
            tail = sum(np.sum(lags[l] ** 2) + np.sum(lags[-l] ** 2) for l in range(kp + 1, 4))
            assert rep.gs_tail[2 * kp + 1] == pytest.approx(p * tail)

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            toeplitz_spectrum_bounds(Var1Spec(np.zeros((2, 2)), 3), p=3, q=2)


class TestMinSeparationRank:
    def test_fast_decay(self):
        assert min_separation_rank(2, 5, 0.01, 1.0 - 1e-12) == 1

    def test_reference_value(self):
        assert min_separation_rank(25, 25, 0.95, 0.1) == 171

    def test_monotone(self):
        assert min_separation_rank(5, 5, 0.9, 0.1) <= min_separation_rank(6, 5, 0.9, 0.1)
        assert min_separation_rank(5, 5, 0.8, 0.1) <= min_separation_rank(5, 5, 0.9, 0.1)

    @pytest.mark.parametrize("u,eps", [(0.0, 0.1), (1.0, 0.1), (0.5, 0.0), (0.5, 1.0)])
    def test_range(self, u, eps):
        with pytest.raises(ValueError):
            min_separation_rank(2, 2, u, eps)
