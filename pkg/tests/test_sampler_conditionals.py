"""Each conditional sampler against an analytic or brute-force oracle."""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from spatial_unmix.errors import InvalidStateError, NumericError
from spatial_unmix.model import softmax_abundances
from spatial_unmix.potts import LabelField, neighbors
from spatial_unmix.sampler import (
    GAMMA, ChainState, ClassHyperParams, UnmixingProblem, class_means_posterior,
    class_variances_posterior, label_conditional_probs, mh_update_coefficients, noise_posterior,
    sample_class_means, sample_class_variances, sample_global_hyper, sample_noise_variance,
    sweep_labels,
)

N_DRAWS = 100_000


def within_3se(samples, expected):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / math.sqrt(samples.size)
    return abs(samples.mean() - expected) < 3 * se


def median_within_3se(samples, expected_median, density_at_median):
    se = 1.0 / (2.0 * density_at_median * math.sqrt(len(samples)))
    return abs(np.median(samples) - expected_median) < 3 * se


def make_state(labels, coeffs, psi, sigma2, s2=1.0, v2=1.0, delta=1.0):
    return ChainState(
        np.asarray(labels, dtype=np.int64), np.asarray(coeffs, dtype=float), s2,
        np.asarray(psi, dtype=float), np.asarray(sigma2, dtype=float), v2, delta,
    )


# --------------------------------------------------------------------------
# labels


class TestLabelConditional:
    def test_indistinguishable_classes_uniform(self):
        field = LabelField(2, 2, [0, 1, 2, 0], 3)
        hyper = ClassHyperParams(np.zeros((3, 2)), np.ones((3, 2)))
        np.testing.assert_allclose(
            label_conditional_probs(0, field, [0.3, -0.2], hyper, beta=0.0), [1 / 3] * 3, atol=1e-15
        )

    def test_gaussian_ratio(self):
        # pixel 4 of a 3x3 lattice has two neighbors in each class
        field = LabelField(3, 3, [0, 0, 0, 0, 0, 1, 0, 1, 0], 2)
        psi = np.array([[0.5, -1.0], [1.5, 0.25]])
        hyper = ClassHyperParams(psi, np.ones((2, 2)))
        d2 = np.sum((psi[0] - psi[1]) ** 2)
        probs = label_conditional_probs(4, field, psi[0], hyper, beta=1.7)
        assert probs[0] == pytest.approx(1 / (1 + math.exp(-0.5 * d2)), abs=1e-12)

    def test_two_by_two_enumeration(self):
        beta, K = 0.9, 2
        rng = np.random.default_rng(0)
        C = rng.normal(size=(2, 4))
        psi = np.array([[0.3, -0.4], [-0.5, 0.6]])
        sigma2 = np.array([[0.5, 1.2], [0.8, 0.3]])
        hyper = ClassHyperParams(psi, sigma2)

        def log_joint(z):
            pairs = sum(z[p] == z[q] for p in range(4) for q in neighbors(p, 2, 2) if q > p)
            lg = sum(
                -0.5 * np.sum(np.log(sigma2[z[p]]))
                - 0.5 * np.sum((C[:, p] - psi[z[p]]) ** 2 / sigma2[z[p]])
                for p in range(4)
            )
            return beta * pairs + lg

        for z in itertools.product(range(K), repeat=4):
            field = LabelField(2, 2, z, K)
            for p in range(4):
                logs = []
                for k in range(K):
                    zz = list(z)
                    zz[p] = k
                    logs.append(log_joint(zz))
                logs = np.array(logs)
                oracle = np.exp(logs - logs.max())
                oracle /= oracle.sum()
                probs = label_conditional_probs(p, field, C[:, p], hyper, beta)
                assert 0.5 * np.abs(probs - oracle).sum() < 1e-12

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        field = LabelField(4, 4, rng.integers(0, 5, 16), 5)
        hyper = ClassHyperParams(rng.normal(size=(5, 3)), rng.uniform(0.1, 2, size=(5, 3)))
        for p in range(16):
            probs = label_conditional_probs(p, field, rng.normal(size=3), hyper, beta=2.0)
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_nonpositive_variance(self):
        with pytest.raises(InvalidStateError):
            ClassHyperParams(np.zeros((2, 2)), np.array([[1.0, 0.0], [1.0, 1.0]]))


class TestSweepLabels:
    def test_overwhelming_coupling(self):
        # pixel 4 surrounded by class 0 at beta=50 and psi favoring class 0
        P = 9
        labels = np.zeros(P, dtype=np.int64)
        psi = np.array([[0.0, 0.0], [3.0, -3.0]])
        state = make_state(labels, np.zeros((2, P)), psi, np.ones((2, 2)))
        hits = 0
        n = 2000
        for i in range(n):
            state.labels = labels.copy()
            state.labels[4] = 1
            out = sweep_labels(state, 50.0, 3, 3, np.random.default_rng(i))
            hits += out[4] == 0
        assert hits / n > 0.999

    def test_zero_coupling_identical_classes_uniform(self):
        K, W = 4, 100
        P = W * W
        state = make_state(np.zeros(P), np.zeros((2, P)), np.zeros((K, 2)), np.ones((K, 2)))
        out = sweep_labels(state, 0.0, W, W, np.random.default_rng(5))
        counts = np.bincount(out, minlength=K)
        chi2 = np.sum((counts - P / K) ** 2 / (P / K))
        # 3 sigma above the chi-square(K-1) mean
        assert chi2 < (K - 1) + 3 * math.sqrt(2 * (K - 1))

    def test_thread_count_invariant(self):
        rng = np.random.default_rng(2)
        P = 15 * 11
        state = make_state(
            rng.integers(0, 3, P), rng.normal(size=(3, P)), rng.normal(size=(3, 3)),
            rng.uniform(0.2, 1.0, size=(3, 3)),
        )
        one = sweep_labels(state, 1.1, 15, 11, np.random.default_rng(9), threads=1)
        many = sweep_labels(state, 1.1, 15, 11, np.random.default_rng(9), threads=7)
        np.testing.assert_array_equal(one, many)


# --------------------------------------------------------------------------
# logistic coefficients


def single_class_problem(P, M, y):
    Y = np.tile(np.asarray(y, dtype=float), (P, 1))
    return UnmixingProblem(Y, M, width=P, height=1)


class TestCoefficientMH:
    def test_zero_step_always_accepted(self):
        rng = np.random.default_rng(0)
        M = rng.uniform(size=(6, 3))
        problem = single_class_problem(5, M, rng.uniform(size=6))
        state = make_state(np.zeros(5), rng.normal(size=(3, 5)), np.zeros((1, 3)), np.ones((1, 3)), s2=0.01)
        coeffs, accepted = mh_update_coefficients(state, problem, np.zeros(3), rng)
        assert accepted.all()
        np.testing.assert_array_equal(coeffs, state.coeffs)

    def test_prior_only_chain_matches_gaussian(self):
        # s2 -> infinity removes the likelihood; c_rp should follow N(psi_r, sigma2_r)
        P, burn, keep = 5000, 100, 20
        M = np.array([[1.0, 0.2], [0.1, 0.9]])
        problem = single_class_problem(P, M, [0.4, 0.6])
        psi = np.array([[0.7, -0.3]])
        sigma2 = np.array([[0.5, 2.0]])
        state = make_state(np.zeros(P), np.full((2, P), 4.0), psi, sigma2, s2=1e12)
        sd = 2.4 * np.sqrt(sigma2[0])
        draws = []
        for it in range(burn + keep):
            state.coeffs, _ = mh_update_coefficients(state, problem, sd, np.random.default_rng(it))
            if it >= burn:
                draws.append(state.coeffs.copy())
        draws = np.array(draws)  # (keep, R, P); pixels are independent chains
        for r in range(2):
            per_pixel_mean = draws[:, r, :].mean(axis=0)
            se = per_pixel_mean.std(ddof=1) / math.sqrt(P)
            assert abs(per_pixel_mean.mean() - psi[0, r]) < 3 * se
            per_pixel_sq = ((draws[:, r, :] - psi[0, r]) ** 2).mean(axis=0)
            se = per_pixel_sq.std(ddof=1) / math.sqrt(P)
            assert abs(per_pixel_sq.mean() - sigma2[0, r]) < 3 * se

    def test_one_band_toy_matches_quadrature(self):
        # L=1, R=2, K=1: one pixel with fixed hyperparameters
        M = np.array([[0.2, 0.9]])
        y, s2 = 0.45, 0.01
        psi = np.array([[0.3, -0.2]])
        sigma2 = np.array([[1.0, 1.5]])

        g = np.linspace(-8, 8, 801)
        c1, c2 = np.meshgrid(g, g, indexing="ij")
        a1 = 1 / (1 + np.exp(c2 - c1))
        mix = M[0, 0] * a1 + M[0, 1] * (1 - a1)
        logp = (
            -((y - mix) ** 2) / (2 * s2)
            - (c1 - psi[0, 0]) ** 2 / (2 * sigma2[0, 0])
            - (c2 - psi[0, 1]) ** 2 / (2 * sigma2[0, 1])
        )
        w = np.exp(logp - logp.max())
        oracle = np.sum(w * a1) / np.sum(w)

        P, burn, keep = 2000, 300, 50
        problem = single_class_problem(P, M, [y])
        state = make_state(np.zeros(P), np.zeros((2, P)), psi, sigma2, s2=s2)
        total, n = 0.0, 0
        for it in range(burn + keep):
            state.coeffs, _ = mh_update_coefficients(state, problem, np.array([1.0, 1.0]), np.random.default_rng(it))
            if it >= burn:
                total += softmax_abundances(state.coeffs)[0].sum()
                n += P
        assert abs(total / n - oracle) < 0.01

    def test_non_finite_target_reports_location(self):
        M = np.eye(2)
        problem = single_class_problem(3, M, [0.5, 0.5])
        state = make_state(np.zeros(3), np.zeros((2, 3)), np.zeros((1, 2)), np.ones((1, 2)), s2=0.0)
        with pytest.raises(NumericError, match=r"iteration 7, pixel \d+, step"):
            mh_update_coefficients(state, problem, np.ones(2), np.random.default_rng(0), iteration=7)

    def test_thread_count_invariant(self):
        rng = np.random.default_rng(3)
        P = 101
        M = rng.uniform(size=(9, 3))
        problem = UnmixingProblem(rng.uniform(size=(P, 9)), M, width=P, height=1)
        state = make_state(rng.integers(0, 2, P), rng.normal(size=(3, P)), rng.normal(size=(2, 3)),
                           np.ones((2, 3)), s2=0.05)
        a = mh_update_coefficients(state, problem, np.full(3, 0.3), np.random.default_rng(1), threads=1)
        b = mh_update_coefficients(state, problem, np.full(3, 0.3), np.random.default_rng(1), threads=6)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


# --------------------------------------------------------------------------
# noise variance


class TestNoiseVariance:
    def test_shape_at_large_dimensions(self):
        L, P = 189, 2500
        problem = UnmixingProblem(np.zeros((P, L)), np.eye(L)[:, :2] + 0.1, width=50, height=50)
        state = make_state(np.zeros(P), np.zeros((2, P)), np.zeros((1, 2)), np.ones((1, 2)))
        shape, _ = noise_posterior(state, problem)
        assert shape == 236251

    def _draws(self, state, problem):
        rng = np.random.default_rng(0)
        return np.array([sample_noise_variance(state, problem, rng) for _ in range(N_DRAWS)])

    def test_zero_residual(self):
        L, P = 3, 4
        M = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        C = np.zeros((2, P))
        Y = (M @ softmax_abundances(C)).T
        problem = UnmixingProblem(Y, M, width=2, height=2)
        state = make_state(np.zeros(P), C, np.zeros((1, 2)), np.ones((1, 2)), delta=1.0)
        shape, scale = noise_posterior(state, problem)
        assert (shape, scale) == pytest.approx((L * P / 2 + 1, 1.0))
        assert within_3se(self._draws(state, problem), 1.0 / (L * P / 2))

    def test_fixed_residual(self):
        L, P = 3, 4
        M = np.eye(3)[:, :2] + 0.2
        C = np.zeros((2, P))
        Y = (M @ softmax_abundances(C)).T + 0.3  # residual 0.3 per band
        S = P * L * 0.09
        problem = UnmixingProblem(Y, M, width=2, height=2)
        state = make_state(np.zeros(P), C, np.zeros((1, 2)), np.ones((1, 2)), delta=0.4)
        assert within_3se(self._draws(state, problem), (0.4 + S / 2) / (L * P / 2))


# --------------------------------------------------------------------------
# class means and variances


class TestClassMeans:
    def test_empty_class_is_prior(self):
        state = make_state([0, 0], [[1.0, 2.0]], [[0.0], [0.0]], [[1.0], [3.0]], v2=2.5)
        mean, var = class_means_posterior(state)
        assert mean[1, 0] == 0.0
        assert var[1, 0] == pytest.approx(2.5)

    def test_flat_prior_limit(self):
        rng = np.random.default_rng(0)
        c = rng.normal(1.0, 0.5, size=(2, 7))
        state = make_state(np.zeros(7), c, np.zeros((1, 2)), [[0.4, 0.9]], v2=1e8)
        mean, var = class_means_posterior(state)
        np.testing.assert_allclose(mean[0], c.mean(axis=1), rtol=1e-4)
        np.testing.assert_allclose(var[0], np.array([0.4, 0.9]) / 7, rtol=1e-4)

    def test_hand_substitution(self):
        # sigma2=1, v2=1, n=4, mean 2 -> N(8/5, 1/5)
        state = make_state(np.zeros(4), [[2.0, 2.0, 2.0, 2.0]], [[0.0]], [[1.0]], v2=1.0)
        mean, var = class_means_posterior(state)
        assert mean[0, 0] == pytest.approx(8 / 5)
        assert var[0, 0] == pytest.approx(1 / 5)

    def test_draws_follow_conditional(self):
        state = make_state(np.zeros(4), [[2.0, 2.0, 2.0, 2.0]], [[0.0]], [[1.0]], v2=1.0)
        rng = np.random.default_rng(1)
        draws = np.array([sample_class_means(state, rng)[0, 0] for _ in range(N_DRAWS)])
        assert within_3se(draws, 8 / 5)
        assert abs(draws.var() - 0.2) < 3 * 0.2 * math.sqrt(2 / N_DRAWS)


class TestClassVariances:
    def test_empty_class_median(self):
        state = make_state([0], [[0.0]], [[0.0], [0.0]], [[1.0], [1.0]])
        shape, scale = class_variances_posterior(state)
        assert (shape[1, 0], scale[1, 0]) == (1.0, GAMMA)
        rng = np.random.default_rng(2)
        draws = np.array([sample_class_variances(state, rng)[1, 0] for _ in range(N_DRAWS)])
        median = GAMMA / math.log(2)
        assert median_within_3se(draws, median, stats.invgamma(1, scale=GAMMA).pdf(median))

    def test_exact_class_mean(self):
        state = make_state(np.zeros(10), np.full((1, 10), 0.7), [[0.7]], [[1.0]])
        shape, scale = class_variances_posterior(state)
        assert (shape[0, 0], scale[0, 0]) == (6.0, 5.0)
        rng = np.random.default_rng(3)
        draws = np.array([sample_class_variances(state, rng)[0, 0] for _ in range(N_DRAWS)])
        assert within_3se(draws, 1.0)

    def test_hand_substitution(self):
        state = make_state([0, 0], [[1.0, -1.0]], [[0.0]], [[1.0]])
        shape, scale = class_variances_posterior(state)
        assert (shape[0, 0], scale[0, 0]) == (2.0, 6.0)


class TestGlobalHyper:
    def test_degenerate_flag(self):
        state = make_state([0], [[0.0]], np.zeros((2, 2)), np.ones((2, 2)))
        v2, delta, degenerate = sample_global_hyper(state, np.random.default_rng(0))
        assert degenerate
        assert v2 > 0 and delta > 0

    def test_v2_conditional(self):
        psi = np.full((3, 3), 1.0)  # sum of squares 9
        state = make_state([0], np.zeros((3, 1)), psi, np.ones((3, 3)))
        rng = np.random.default_rng(4)
        draws = np.array([sample_global_hyper(state, rng)[0] for _ in range(N_DRAWS)])
        assert within_3se(draws, 4.5 / 3.5)

    def test_delta_mean_is_noise_variance(self):
        state = make_state([0], np.zeros((2, 1)), np.ones((1, 2)), np.ones((1, 2)), s2=0.001)
        rng = np.random.default_rng(5)
        draws = np.array([sample_global_hyper(state, rng)[1] for _ in range(N_DRAWS)])
        assert within_3se(draws, 0.001)
