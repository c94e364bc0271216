#!/usr/bin/python3

import math, unittest

import mpmath
import numpy as np
from scipy import integrate, stats

from natpn import expfam
from natpn.expfam import (Categorical, ConjugateParams, Dirichlet, FamilyKind, Gamma, Normal,
    NormalInverseGamma, Poisson, family)
from natpn.log import log
from natpn.util import ConfigError, ContractError, DomainError


SAMPLES = 100_000

#: Monte-Carlo checks allow this many standard errors
SE_BAND = 4.0


def nig(mu0, lam, alpha, beta):
    return Normal().from_standard(NormalInverseGamma(mu0, lam, alpha, beta))


def sample_nig(rng, mu0, lam, alpha, beta, size):
    var = beta / rng.gamma(alpha, 1.0, size=size)
    mu = rng.normal(mu0, np.sqrt(var / lam))
    return mu, var


class TestMappings(unittest.TestCase):
    def test_to_standard_examples(self):
        d = Categorical(3).to_standard(ConjugateParams(np.full(3, 1 / 3), 3.0))
        np.testing.assert_allclose(d.alpha, [1.0, 1.0, 1.0])

        n = Normal().to_standard(ConjugateParams([0.0, 100.0], 1.0))
        self.assertEqual((float(n.mu0), float(n.lam), float(n.alpha), float(n.beta)), (0.0, 1.0, 0.5, 50.0))

        g = Poisson().to_standard(ConjugateParams([1.0], 1.0))
        self.assertEqual((float(g.alpha), float(g.beta)), (1.0, 1.0))

    def test_default_priors(self):
        self.assertEqual(Categorical(4).default_prior(), ConjugateParams(np.full(4, 0.25), 4.0))
        self.assertEqual(Normal().default_prior(), ConjugateParams([0.0, 100.0], 1.0))
        self.assertEqual(Poisson().default_prior(), ConjugateParams([1.0], 1.0))

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        cat = Categorical(4)
        alpha = rng.uniform(0.1, 50, size=(1000, 4))
        back = cat.to_standard(cat.from_standard(Dirichlet(alpha)))
        np.testing.assert_allclose(back.alpha, alpha, rtol=1e-10)

        normal = Normal()
        a = rng.uniform(0.1, 100, size=1000)
        std = NormalInverseGamma(rng.normal(0, 3, size=1000), 2 * a, a, rng.uniform(0.1, 100, size=1000))
        back = normal.to_standard(normal.from_standard(std))
        for field in ('mu0', 'lam', 'alpha', 'beta'):
            np.testing.assert_allclose(getattr(back, field), getattr(std, field), rtol=1e-10, atol=1e-10)

        poisson = Poisson()
        std = Gamma(rng.uniform(0.1, 100, size=1000), rng.uniform(0.1, 100, size=1000))
        back = poisson.to_standard(poisson.from_standard(std))
        np.testing.assert_allclose(back.alpha, std.alpha, rtol=1e-10)
        np.testing.assert_allclose(back.beta, std.beta, rtol=1e-10)

    def test_invariant_violations(self):
        with self.assertRaisesRegex(DomainError, 'sum to 1'):
            Categorical(2).to_standard(ConjugateParams([0.7, 0.7], 2.0))
        with self.assertRaisesRegex(DomainError, r'chi\[1\]'):
            Normal().to_standard(ConjugateParams([2.0, 4.0], 1.0))
        with self.assertRaisesRegex(DomainError, 'chi must be > 0'):
            Poisson().to_standard(ConjugateParams([0.0], 1.0))
        with self.assertRaisesRegex(DomainError, 'evidence'):
            Poisson().to_standard(ConjugateParams([1.0], 0.0))
        with self.assertRaisesRegex(DomainError, 'lambda = 2 alpha'):
            Normal().from_standard(NormalInverseGamma(0.0, 1.0, 1.0, 1.0))
        with self.assertRaises(DomainError):
            Categorical(1)

    def test_family_factory(self):
        self.assertEqual(family('categorical', 3), Categorical(3))
        self.assertEqual(family(FamilyKind.POISSON).kind, FamilyKind.POISSON)
        with self.assertRaises(ConfigError):
            family('categorical')
        with self.assertRaises(ConfigError):
            family('gaussian')

    def test_sufficient_statistics(self):
        s = Categorical(3).sufficient_statistic([2, 0])
        np.testing.assert_array_equal(s.u, [[0, 0, 1], [1, 0, 0]])
        s = Normal().sufficient_statistic(np.array([2.0]))
        np.testing.assert_array_equal(s.u, [[2.0, 4.0]])
        s = Poisson().sufficient_statistic(np.array([3.0]))
        np.testing.assert_allclose(s.log_h, [-math.log(6)])

    def test_invalid_targets(self):
        post = Categorical(2).default_prior()
        with self.assertRaises(DomainError):
            expfam.expected_log_likelihood(2, post, Categorical(2))
        with self.assertRaises(DomainError):
            expfam.expected_log_likelihood(1.5, Poisson().default_prior(), Poisson())
        with self.assertRaises(DomainError):
            expfam.expected_log_likelihood(-1, Poisson().default_prior(), Poisson())
        with self.assertRaises(DomainError):
            expfam.expected_log_likelihood(np.inf, Normal().default_prior(), Normal())


class TestExpectedLogLikelihood(unittest.TestCase):
    def test_exact_values(self):
        cat = Categorical(2)
        post = cat.from_standard(Dirichlet([1.0, 1.0]))
        self.assertAlmostEqual(expfam.expected_log_likelihood(0, post, cat), -1.0, places=12)

        poisson = Poisson()
        post = poisson.from_standard(Gamma(1.0, 1.0))
        self.assertAlmostEqual(expfam.expected_log_likelihood(0, post, poisson), -1.0, places=12)

    def test_batched(self):
        cat = Categorical(3)
        post = ConjugateParams(np.array([[0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]]), np.array([10.0, 3.0]))
        values = cat.expected_log_likelihood(np.array([2, 0]), post)
        self.assertEqual(values.shape, (2,))
        self.assertAlmostEqual(values[1], cat.expected_log_likelihood(0, post[1]), places=14)

    def test_single_params_need_single_target(self):
        for fam, y in [(Categorical(3), [0, 2]), (Normal(), [0.5, -1.0, 2.0]), (Poisson(), [1, 3])]:
            with self.assertRaises(ContractError):
                fam.expected_log_likelihood(np.array(y), fam.default_prior())
        self.assertIsInstance(Poisson().expected_log_likelihood(np.array([3]), Poisson().default_prior()), float)

    def test_dirichlet_floor_is_logged(self):
        cat = Categorical(2)
        with self.assertLogs(log, 'INFO') as ctx:
            value = cat.expected_log_likelihood(0, ConjugateParams([1.0, 0.0], 2.0))
        self.assertTrue(np.isfinite(value))
        self.assertIn('clamped 1 concentration', ctx.output[0])

    def _check(self, estimate, values):
        se = np.std(values) / math.sqrt(len(values))
        self.assertLess(abs(estimate - np.mean(values)), SE_BAND * se + 1e-12)

    def test_categorical_monte_carlo(self):
        rng = np.random.default_rng(1)
        cat = Categorical(3)
        for _ in range(5):
            alpha = rng.uniform(0.5, 10, size=3)
            y = int(rng.integers(3))
            theta = rng.dirichlet(alpha, size=SAMPLES)
            self._check(cat.expected_log_likelihood(y, cat.from_standard(Dirichlet(alpha))), np.log(theta[:, y]))

    def test_normal_monte_carlo(self):
        rng = np.random.default_rng(2)
        normal = Normal()
        cases = [(0.0, 2.0, 1.0, 1.0, 0.5)]
        for _ in range(4):
            a = rng.uniform(1.5, 20)
            cases.append((rng.normal(), 2 * a, a, rng.uniform(0.5, 10), rng.normal(0, 2)))
        for mu0, lam, alpha, beta, y in cases:
            mu, var = sample_nig(rng, mu0, lam, alpha, beta, SAMPLES)
            values = stats.norm.logpdf(y, mu, np.sqrt(var))
            self._check(normal.expected_log_likelihood(y, nig(mu0, lam, alpha, beta)), values)

    def test_poisson_monte_carlo(self):
        rng = np.random.default_rng(3)
        poisson = Poisson()
        for _ in range(5):
            alpha, beta = rng.uniform(0.5, 20), rng.uniform(0.2, 5)
            y = float(rng.integers(0, 10))
            rate = rng.gamma(alpha, 1 / beta, size=SAMPLES)
            values = stats.poisson.logpmf(y, rate)
            self._check(poisson.expected_log_likelihood(y, poisson.from_standard(Gamma(alpha, beta))), values)


class TestPriorEntropy(unittest.TestCase):
    def test_exact_values(self):
        cat = Categorical(2)
        self.assertAlmostEqual(expfam.prior_entropy(cat.from_standard(Dirichlet([1.0, 1.0])), cat), 0.0, places=12)
        poisson = Poisson()
        self.assertAlmostEqual(expfam.prior_entropy(poisson.from_standard(Gamma(1.0, 1.0)), poisson), 1.0, places=12)

    def test_scipy_entropies(self):
        alpha = np.array([2.0, 3.5, 0.7])
        cat = Categorical(3)
        self.assertAlmostEqual(cat.prior_entropy(cat.from_standard(Dirichlet(alpha))), stats.dirichlet(alpha).entropy(), places=10)
        poisson = Poisson()
        self.assertAlmostEqual(poisson.prior_entropy(poisson.from_standard(Gamma(3.0, 2.0))),
                               stats.gamma(3.0, scale=0.5).entropy(), places=10)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        for _ in range(3):
            alpha = rng.uniform(1.0, 20, size=3)
            theta = rng.dirichlet(alpha, size=SAMPLES)
            theta = theta / theta.sum(axis=1, keepdims=True)
            values = -stats.dirichlet(alpha).logpdf(theta.T)
            cat = Categorical(3)
            estimate = cat.prior_entropy(cat.from_standard(Dirichlet(alpha)))
            self.assertLess(abs(estimate - values.mean()), SE_BAND * values.std() / math.sqrt(SAMPLES))

            a, b = rng.uniform(1.0, 50), rng.uniform(0.5, 10)
            mu0, lam = rng.normal(), 2 * a
            mu, var = sample_nig(rng, mu0, lam, a, b, SAMPLES)
            values = -(stats.norm.logpdf(mu, mu0, np.sqrt(var / lam)) + stats.invgamma.logpdf(var, a, scale=b))
            estimate = Normal().prior_entropy(nig(mu0, lam, a, b))
            self.assertLess(abs(estimate - values.mean()), SE_BAND * values.std() / math.sqrt(SAMPLES))

    def _exact_mp(self, kind, params):
        mpmath.mp.dps = 50
        if kind == 'dirichlet':
            a = [mpmath.mpf(v) for v in params]
            a0 = sum(a)
            log_b = sum(mpmath.loggamma(v) for v in a) - mpmath.loggamma(a0)
            return float(log_b + (a0 - len(a)) * mpmath.digamma(a0) - sum((v - 1) * mpmath.digamma(v) for v in a))
        elif kind == 'nig':
            lam, a, b = (mpmath.mpf(v) for v in params)
            return float(mpmath.mpf(1) / 2 + mpmath.log(2 * mpmath.pi) / 2 + 1.5 * mpmath.log(b) + mpmath.loggamma(a)
                         - mpmath.log(lam) / 2 + a - (a + 1.5) * mpmath.digamma(a))
        else:
            a, b = (mpmath.mpf(v) for v in params)
            return float(a + mpmath.loggamma(a) - mpmath.log(b) + (1 - a) * mpmath.digamma(a))

    def test_large_concentration_approximations(self):
        cat = Categorical(2)
        approx = cat.prior_entropy(cat.from_standard(Dirichlet([5000.0, 5000.0])))
        exact = self._exact_mp('dirichlet', [5000, 5000])
        self.assertLess(abs(approx - exact) / abs(exact), 1e-3)

        approx = Normal().prior_entropy(nig(0.0, 2e4, 1e4, 1e4))
        exact = self._exact_mp('nig', [2e4, 1e4, 1e4])
        self.assertLess(abs(approx - exact) / abs(exact), 1e-3)

        poisson = Poisson()
        approx = poisson.prior_entropy(poisson.from_standard(Gamma(1e4, 1.0)))
        exact = self._exact_mp('gamma', [1e4, 1.0])
        self.assertLess(abs(approx - exact) / abs(exact), 1e-3)

    def test_continuity_at_threshold(self):
        poisson = Poisson()
        below = poisson.prior_entropy(poisson.from_standard(Gamma(9999.999, 1.0)))
        above = poisson.prior_entropy(poisson.from_standard(Gamma(1e4, 1.0)))
        self.assertLess(abs(below - above) / abs(above), 1e-3)

        below = Normal().prior_entropy(nig(0.0, 2 * 9999.999, 9999.999, 50.0))
        above = Normal().prior_entropy(nig(0.0, 2e4, 1e4, 50.0))
        self.assertLess(abs(below - above) / abs(above), 1e-3)

    def test_evidence_lowers_entropy(self):
        cat = Categorical(3)
        chi = np.array([0.5, 0.3, 0.2])
        entropies = [cat.prior_entropy(ConjugateParams(chi, n)) for n in np.geomspace(10, 1e6, 40)]
        self.assertTrue(np.all(np.diff(entropies) < 0))


class TestTargetEntropy(unittest.TestCase):
    def test_values(self):
        self.assertAlmostEqual(expfam.target_entropy([0.5, 0.5], Categorical(2)), math.log(2), places=14)
        self.assertAlmostEqual(expfam.target_entropy(math.sqrt(1 / (2 * math.pi)), Normal()), 0.0, places=14)
        self.assertAlmostEqual(expfam.target_entropy([1.0, 0.0], Categorical(2)), 0.0, places=14)

    def test_poisson_series(self):
        k = np.arange(201)
        for rate in (0.01, 3.0, 40.0):
            pmf = stats.poisson.pmf(k, rate)
            oracle = -np.sum(np.where(pmf > 0, pmf * np.log(np.where(pmf > 0, pmf, 1.0)), 0.0))
            self.assertAlmostEqual(Poisson().target_entropy(rate), oracle, delta=1e-10)
        self.assertAlmostEqual(Poisson().target_entropy(500.0), stats.poisson(500.0).entropy(), places=6)

    def test_domain(self):
        with self.assertRaises(DomainError):
            Poisson().target_entropy(0.0)
        with self.assertRaises(DomainError):
            Normal().target_entropy(-1.0)
        with self.assertRaises(DomainError):
            Categorical(2).target_entropy([0.8, 0.8])


class TestPosteriorPredictive(unittest.TestCase):
    def test_categorical(self):
        cat = Categorical(2)
        pred = expfam.posterior_predictive(cat.from_standard(Dirichlet([2.0, 1.0])), cat)
        np.testing.assert_allclose(pred.probs, [2 / 3, 1 / 3])
        self.assertAlmostEqual(float(pred.cdf(1)), 1.0)

    def test_student_t(self):
        pred = Normal().posterior_predictive(nig(0.0, 1.0, 0.5, 50.0))
        self.assertEqual(float(pred.df), 1.0)
        self.assertAlmostEqual(float(pred.scale), math.sqrt(50 * 2 / 0.5))
        self.assertAlmostEqual(float(pred.cdf(0.0)), 0.5)

    def test_student_t_normalized(self):
        pred = Normal().posterior_predictive(nig(1.5, 20.0, 10.0, 4.0))
        s = float(pred.scale)
        total, _ = integrate.quad(lambda y: math.exp(pred.log_prob(y)), 1.5 - 50 * s, 1.5 + 50 * s, limit=200)
        self.assertAlmostEqual(total, 1.0, delta=1e-6)

    def test_negative_binomial(self):
        poisson = Poisson()
        pred = poisson.posterior_predictive(poisson.from_standard(Gamma(2.0, 1.0)))
        self.assertAlmostEqual(math.exp(pred.log_prob(0)), 0.25, places=12)
        marginal, _ = integrate.quad(lambda lam: stats.poisson.pmf(0, lam) * stats.gamma.pdf(lam, 2.0), 0, np.inf)
        self.assertAlmostEqual(math.exp(pred.log_prob(0)), marginal, places=8)
        total = np.sum(np.exp(pred.log_prob(np.arange(400))))
        self.assertAlmostEqual(total, 1.0, delta=1e-6)


if __name__ == '__main__':
    unittest.main()
