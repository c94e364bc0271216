"""Closed-form exponential-family mathematics.

Each target distribution is described by an :py:class:`ExponentialFamily` which pairs it
with its conjugate prior in the natural ``(chi, n)`` parametrization:

============  ================  ===========================================
likelihood    conjugate prior   mapping to ``(chi, n)``
============  ================  ===========================================
Categorical   Dirichlet(alpha)  ``chi = alpha / n``, ``n = sum(alpha)``
Normal        NIG(mu0, l, a, b) ``chi = (mu0, mu0^2 + 2b/n)``, ``n = l = 2a``
Poisson       Gamma(a, b)       ``chi = a / n``, ``n = b``
============  ================  ===========================================

The expected log-likelihood and the posterior entropy are written once, on
:py:class:`natpn.tensor.Node` values, so the training loss and the plain-array helpers
(:py:func:`expected_log_likelihood`, :py:func:`prior_entropy`) share the same formulas.
"""

from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np
from scipy import stats

from . import special
from . import tensor as T
from .log import log
from .tensor import Node
from .util import *


#: Concentration at and above which posterior entropies use their large-parameter form
APPROX_THRESHOLD = 1e4

#: Floor applied to Dirichlet concentrations before they reach lgamma/digamma
ALPHA_FLOOR = 1e-30

SIMPLEX_TOL = 1e-8

_LOG_2PI = math.log(2 * math.pi)


class FamilyKind(Enum):
    CATEGORICAL = 'categorical'
    NORMAL = 'normal'
    POISSON = 'poisson'


class ConjugateParams(Base):
    """Natural conjugate-prior parameters. Arrays may carry leading batch dimensions."""

    chi: np.ndarray #: Prior-mean parameter, shape (..., L)
    n: np.ndarray #: Evidence pseudo-count, shape (...)

    def __init__(self, chi, n):
        self.chi = np.asarray(chi, dtype=np.float64)
        self.n = np.asarray(n, dtype=np.float64)
        if self.chi.ndim == 0 or self.chi.shape[:-1] != self.n.shape:
            raise DimensionError('chi must be (..., L) with n of shape (...)', self.chi.shape, self.n.shape)

    def __getitem__(self, index):
        return ConjugateParams(self.chi[index], self.n[index])

    def __len__(self):
        return len(self.n)

    def __eq__(self, other):
        if not isinstance(other, self.__class__):
            return NotImplemented
        return np.array_equal(self.chi, other.chi) and np.array_equal(self.n, other.n)


class StandardParams(Base):
    """Family-specific "well known" parametrization of a conjugate prior."""


class Dirichlet(StandardParams):
    alpha: np.ndarray #: Concentrations, shape (..., C)

    def __init__(self, alpha):
        self.alpha = np.asarray(alpha, dtype=np.float64)


class NormalInverseGamma(StandardParams):
    mu0: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __init__(self, mu0, lam, alpha, beta):
        self.mu0 = np.asarray(mu0, dtype=np.float64)
        self.lam = np.asarray(lam, dtype=np.float64)
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)


class Gamma(StandardParams):
    alpha: np.ndarray
    beta: np.ndarray

    def __init__(self, alpha, beta):
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)


class SufficientStat(Base):
    u: np.ndarray #: Sufficient statistic u(y), shape (..., L)
    log_h: np.ndarray #: Log carrier measure at y

    def __init__(self, u, log_h):
        self.u = np.asarray(u, dtype=np.float64)
        self.log_h = np.asarray(log_h, dtype=np.float64)


class PredictiveDistribution(Base):
    """Posterior predictive distribution, with the parameter marginalized out."""

    def log_prob(self, y) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, y) -> np.ndarray:
        raise NotImplementedError

    def mean(self) -> np.ndarray:
        raise NotImplementedError


class CategoricalPredictive(PredictiveDistribution):
    probs: np.ndarray #: Class probabilities alpha / alpha_0, shape (..., C)

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def _take(self, values, y):
        y = np.asarray(y, dtype=np.int64)
        if values.ndim == 1:
            return values[y]
        return np.take_along_axis(values, y[..., None], axis=-1)[..., 0]

    def log_prob(self, y):
        with np.errstate(divide='ignore'):
            return np.log(self._take(self.probs, y))

    def cdf(self, y):
        return self._take(np.cumsum(self.probs, axis=-1), y)

    def mean(self):
        return self.probs


class StudentTPredictive(PredictiveDistribution):
    df: np.ndarray
    loc: np.ndarray
    scale: np.ndarray

    def __init__(self, df, loc, scale):
        self.df = np.asarray(df, dtype=np.float64)
        self.loc = np.asarray(loc, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self._dist = stats.t(df=self.df, loc=self.loc, scale=self.scale)

    def log_prob(self, y):
        return self._dist.logpdf(y)

    def cdf(self, y):
        return self._dist.cdf(y)

    def mean(self):
        return self.loc

    def interval(self, confidence):
        return self._dist.interval(confidence)


class NegativeBinomialPredictive(PredictiveDistribution):
    r: np.ndarray #: Number of successes (the Gamma shape)
    p: np.ndarray #: Success probability beta / (beta + 1)

    def __init__(self, r, p):
        self.r = np.asarray(r, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self._dist = stats.nbinom(n=self.r, p=self.p)

    def log_prob(self, y):
        return self._dist.logpmf(y)

    def cdf(self, y):
        return self._dist.cdf(y)

    def mean(self):
        return self.r * (1 - self.p) / self.p

    def interval(self, confidence):
        return self._dist.interval(confidence)


def _batched(chi, n):
    """Lift single parameters to a batch of one so the Node formulas see (B, L) and (B,)."""
    chi = np.asarray(chi, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    single = n.ndim == 0
    return np.atleast_2d(chi), np.atleast_1d(n), single


def _unbatch(values: np.ndarray, single: bool):
    if not single:
        return values
    if values.shape[0] != 1:
        raise ContractError(f'single parameters give one value, got {values.shape[0]}')
    return float(values[0])


class ExponentialFamily(Base):
    """A target distribution and its conjugate prior."""

    kind: FamilyKind #: Which row of the family table this is
    dim: int #: Length L of the sufficient statistic

    @property
    def decoder_dim(self) -> int:
        """Number of raw decoder outputs consumed by :py:meth:`link`."""
        return self.dim

    def link(self, raw: Node) -> Node:
        """Map raw decoder outputs (B, decoder_dim) to valid ``chi`` updates (B, L)."""
        raise NotImplementedError

    def initial_bias(self, targets: np.ndarray) -> np.ndarray:
        """Decoder bias whose :py:meth:`link` reproduces the marginal target statistics."""
        raise NotImplementedError

    def default_prior(self) -> ConjugateParams:
        raise NotImplementedError

    def check(self, params: ConjugateParams) -> ConjugateParams:
        """Raise :py:class:`DomainError` unless ``params`` satisfies the family constraints."""
        if params.chi.shape[-1] != self.dim:
            raise DomainError(f'{self.kind.value}: chi must have length {self.dim}, got {params.chi.shape[-1]}')
        if not (np.all(np.isfinite(params.chi)) and np.all(np.isfinite(params.n))):
            raise DomainError(f'{self.kind.value}: parameters must be finite')
        if np.any(params.n <= 0):
            raise DomainError(f'{self.kind.value}: evidence n must be > 0')
        return params

    def check_targets(self, y) -> np.ndarray:
        raise NotImplementedError

    def sufficient_statistic(self, y) -> SufficientStat:
        raise NotImplementedError

    def to_standard(self, params: ConjugateParams) -> StandardParams:
        raise NotImplementedError

    def from_standard(self, standard: StandardParams) -> ConjugateParams:
        raise NotImplementedError

    def expected_log_likelihood_node(self, y: np.ndarray, chi: Node, n: Node) -> Node:
        raise NotImplementedError

    def prior_entropy_node(self, chi: Node, n: Node) -> Node:
        raise NotImplementedError

    def mean_target(self, params: ConjugateParams) -> np.ndarray:
        """Target-distribution parameters at the posterior mean: p, sigma or rate."""
        raise NotImplementedError

    def target_entropy(self, target) -> np.ndarray:
        raise NotImplementedError

    def posterior_predictive(self, params: ConjugateParams) -> PredictiveDistribution:
        raise NotImplementedError

    def point_prediction(self, params: ConjugateParams) -> np.ndarray:
        raise NotImplementedError

    def expected_log_likelihood(self, y, params: ConjugateParams):
        self.check(params)
        chi, n, single = _batched(params.chi, params.n)
        y = np.atleast_1d(self.check_targets(y))
        if single and len(y) != 1:
            raise ContractError(f'{self.kind.value}: single parameters need a single target, got {len(y)}')
        with T.no_grad():
            out = self.expected_log_likelihood_node(y, T.constant(chi), T.constant(n)).value
        return _unbatch(out, single)

    def prior_entropy(self, params: ConjugateParams):
        self.check(params)
        chi, n, single = _batched(params.chi, params.n)
        with T.no_grad():
            out = self.prior_entropy_node(T.constant(chi), T.constant(n)).value
        return _unbatch(out, single)

    def __eq__(self, other):
        if not isinstance(other, ExponentialFamily):
            return NotImplemented
        return self.kind is other.kind and self.dim == other.dim

    def __hash__(self):
        return hash((self.kind, self.dim))


class Categorical(ExponentialFamily):
    """Categorical likelihood with a Dirichlet prior."""

    num_classes: int

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise DomainError(f'categorical needs at least 2 classes, got {num_classes}')
        self.kind = FamilyKind.CATEGORICAL
        self.num_classes = num_classes
        self.dim = num_classes

    def link(self, raw):
        return T.softmax(raw, axis=-1)

    def initial_bias(self, targets):
        counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=self.num_classes) + 1.0
        return np.log(counts / counts.sum())

    def default_prior(self):
        C = self.num_classes
        return ConjugateParams(np.full(C, 1.0 / C), float(C))

    def check(self, params):
        super().check(params)
        if np.any(params.chi < 0):
            raise DomainError('categorical: chi must be non-negative')
        if np.any(np.abs(params.chi.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
            raise DomainError('categorical: chi must sum to 1')
        return params

    def check_targets(self, y):
        y = np.asarray(y)
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)) or np.any((y < 0) | (y >= self.num_classes)):
            raise DomainError(f'categorical: targets must be class indices in [0, {self.num_classes})')
        return y.astype(np.int64)

    def sufficient_statistic(self, y):
        y = self.check_targets(y)
        return SufficientStat(np.eye(self.num_classes)[y], np.zeros(y.shape))

    def to_standard(self, params):
        self.check(params)
        return Dirichlet(params.n[..., None] * params.chi)

    def from_standard(self, standard):
        alpha = standard.alpha
        if np.any(alpha <= 0):
            raise DomainError('dirichlet: alpha must be > 0')
        n = alpha.sum(axis=-1)
        return ConjugateParams(alpha / n[..., None], n)

    def _alpha(self, chi, n):
        alpha = T.column(n) * chi
        floored = alpha.value < ALPHA_FLOOR
        if np.any(floored):
            log.info('dirichlet: clamped %d concentration(s) to %g', int(floored.sum()), ALPHA_FLOOR)
            alpha = T.clip(alpha, lo=ALPHA_FLOOR)
        return alpha

    def expected_log_likelihood_node(self, y, chi, n):
        alpha = self._alpha(chi, n)
        onehot = np.eye(self.num_classes)[y]
        return T.sum(T.digamma(alpha) * onehot, axis=1) - T.digamma(T.sum(alpha, axis=1))

    def prior_entropy_node(self, chi, n):
        K = self.num_classes
        alpha = self._alpha(chi, n)
        alpha0 = T.sum(alpha, axis=1)
        log_beta = T.sum(T.lgamma(alpha), axis=1) - T.lgamma(alpha0)
        exact = log_beta + (alpha0 - K) * T.digamma(alpha0) - T.sum((alpha - 1.0) * T.digamma(alpha), axis=1)
        approx = (K - 1) / 2 * (1 + _LOG_2PI) + 0.5 * T.sum(T.log(alpha), axis=1) - (K - 0.5) * T.log(alpha0)
        return T.where(alpha0.value >= APPROX_THRESHOLD, approx, exact)

    def mean_target(self, params):
        return params.chi

    def target_entropy(self, target):
        """Shannon entropy ``-sum p log p`` of a categorical distribution."""
        p = np.asarray(target, dtype=np.float64)
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
            raise DomainError('categorical: probabilities must lie on the simplex')
        with np.errstate(divide='ignore', invalid='ignore'):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return -terms.sum(axis=-1)

    def posterior_predictive(self, params):
        self.check(params)
        return CategoricalPredictive(params.chi)

    def point_prediction(self, params):
        return np.argmax(params.chi, axis=-1)


class Normal(ExponentialFamily):
    """Normal likelihood with unknown mean and variance, with a Normal-Inverse-Gamma prior."""

    #: Floor on the implied variance chi_1 - chi_0^2 inside the loss
    VARIANCE_FLOOR = 1e-12

    def __init__(self):
        self.kind = FamilyKind.NORMAL
        self.dim = 2

    def link(self, raw):
        mu = raw[:, 0]
        var = T.softplus(raw[:, 1])
        return T.concat([T.column(mu), T.column(T.square(mu) + var)], axis=1)

    def initial_bias(self, targets):
        targets = np.asarray(targets, dtype=np.float64)
        var = max(float(np.var(targets)), 1e-6)
        return np.array([float(np.mean(targets)), var + math.log(-math.expm1(-var))])

    def default_prior(self):
        return ConjugateParams(np.array([0.0, 100.0]), 1.0)

    def check(self, params):
        super().check(params)
        if np.any(params.chi[..., 1] <= params.chi[..., 0] ** 2):
            raise DomainError('normal: chi[1] must exceed chi[0]^2 (positive variance term 2*beta/n)')
        return params

    def check_targets(self, y):
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise DomainError('normal: targets must be finite')
        return y

    def sufficient_statistic(self, y):
        y = self.check_targets(y)
        return SufficientStat(np.stack([y, y * y], axis=-1), np.full(y.shape, -0.5 * _LOG_2PI))

    def to_standard(self, params):
        self.check(params)
        mu0 = params.chi[..., 0]
        n = params.n
        return NormalInverseGamma(mu0, n, n / 2, n * (params.chi[..., 1] - mu0 ** 2) / 2)

    def from_standard(self, standard):
        if np.any(standard.lam <= 0) or np.any(standard.alpha <= 0) or np.any(standard.beta <= 0):
            raise DomainError('nig: lambda, alpha and beta must be > 0')
        if not np.allclose(standard.lam, 2 * standard.alpha, rtol=1e-12, atol=0):
            raise DomainError('nig: natural parametrization requires lambda = 2 alpha')
        n = standard.lam
        chi = np.stack([standard.mu0, standard.mu0 ** 2 + 2 * standard.beta / n], axis=-1)
        return ConjugateParams(chi, n)

    def _standard_nodes(self, chi, n):
        mu0 = chi[:, 0]
        var = T.clip(chi[:, 1] - T.square(mu0), lo=self.VARIANCE_FLOOR)
        alpha = n * 0.5
        beta = alpha * var
        return mu0, n, alpha, beta

    def expected_log_likelihood_node(self, y, chi, n):
        mu0, lam, alpha, beta = self._standard_nodes(chi, n)
        return 0.5 * (-(alpha / beta) * T.square(y - mu0) - 1.0 / lam + T.digamma(alpha) - T.log(beta) - _LOG_2PI)

    def prior_entropy_node(self, chi, n):
        _, lam, alpha, beta = self._standard_nodes(chi, n)
        exact = (0.5 + 0.5 * _LOG_2PI + 1.5 * T.log(beta) + T.lgamma(alpha) - 0.5 * T.log(lam)
                 + alpha - (alpha + 1.5) * T.digamma(alpha))
        approx = 1 + _LOG_2PI - 2 * T.log(alpha) + 1.5 * T.log(beta) - 0.5 * T.log(lam)
        return T.where(alpha.value >= APPROX_THRESHOLD, approx, exact)

    def mean_target(self, params):
        # plug-in sigma^2 = beta / alpha, the inverse of the posterior mean precision
        return np.sqrt(params.chi[..., 1] - params.chi[..., 0] ** 2)

    def target_entropy(self, target):
        sigma = np.asarray(target, dtype=np.float64)
        if np.any(~(sigma > 0)):
            raise DomainError('normal: sigma must be > 0')
        return 0.5 * np.log(2 * math.pi * sigma ** 2)

    def posterior_predictive(self, params):
        nig = self.to_standard(params)
        scale = np.sqrt(nig.beta * (1 + 1 / nig.lam) / nig.alpha)
        return StudentTPredictive(2 * nig.alpha, nig.mu0, scale)

    def point_prediction(self, params):
        return params.chi[..., 0]


class Poisson(ExponentialFamily):
    """Poisson likelihood with a Gamma prior."""

    #: Series terms below this are dropped once past the mode
    SERIES_TOL = 1e-12

    def __init__(self):
        self.kind = FamilyKind.POISSON
        self.dim = 1

    def link(self, raw):
        return T.softplus(raw) + 1e-6

    def initial_bias(self, targets):
        rate = max(float(np.mean(targets)), 1e-3)
        # inverse softplus
        return np.array([rate + math.log(-math.expm1(-rate))])

    def default_prior(self):
        return ConjugateParams(np.array([1.0]), 1.0)

    def check(self, params):
        super().check(params)
        if np.any(params.chi[..., 0] <= 0):
            raise DomainError('poisson: chi must be > 0')
        return params

    def check_targets(self, y):
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            raise DomainError('poisson: targets must be non-negative integers')
        return y

    def sufficient_statistic(self, y):
        y = self.check_targets(y)
        return SufficientStat(y[..., None], -special.lgamma(y + 1))

    def to_standard(self, params):
        self.check(params)
        return Gamma(params.n * params.chi[..., 0], params.n)

    def from_standard(self, standard):
        if np.any(standard.alpha <= 0) or np.any(standard.beta <= 0):
            raise DomainError('gamma: alpha and beta must be > 0')
        return ConjugateParams((standard.alpha / standard.beta)[..., None], standard.beta)

    def expected_log_likelihood_node(self, y, chi, n):
        alpha = n * chi[:, 0]
        beta = n
        return (T.digamma(alpha) - T.log(beta)) * y - alpha / beta - special.lgamma(y + 1)

    def prior_entropy_node(self, chi, n):
        alpha = n * chi[:, 0]
        beta = n
        exact = alpha + T.lgamma(alpha) - T.log(beta) + (1.0 - alpha) * T.digamma(alpha)
        approx = 0.5 + 0.5 * _LOG_2PI + 0.5 * T.log(alpha) - T.log(beta)
        return T.where(alpha.value >= APPROX_THRESHOLD, approx, exact)

    def mean_target(self, params):
        return params.chi[..., 0]

    def _entropy(self, rate: float) -> float:
        kmax = int(10 * rate + 100)
        k = np.arange(kmax + 1, dtype=np.float64)
        log_fact = special.lgamma(k + 1)
        terms = np.exp(k * math.log(rate) - rate - log_fact) * log_fact
        # stop at the first negligible term past the mode; log(k!) vanishes for k < 2
        small = np.flatnonzero((terms < self.SERIES_TOL) & (k > rate) & (k >= 2))
        if small.size:
            terms = terms[:small[0]]
        return rate * (1 - math.log(rate)) + float(np.sum(terms))

    def target_entropy(self, target):
        rate = np.asarray(target, dtype=np.float64)
        if np.any(~(rate > 0)) or not np.all(np.isfinite(rate)):
            raise DomainError('poisson: rate must be > 0')
        flat = np.array([self._entropy(r) for r in rate.ravel()])
        return flat.reshape(rate.shape) if rate.ndim else float(flat[0])

    def posterior_predictive(self, params):
        gamma = self.to_standard(params)
        return NegativeBinomialPredictive(gamma.alpha, gamma.beta / (gamma.beta + 1))

    def point_prediction(self, params):
        return params.chi[..., 0]


def family(kind: Union[FamilyKind, str], num_classes: Optional[int] = None) -> ExponentialFamily:
    kind = FamilyKind(kind)
    if kind is FamilyKind.CATEGORICAL:
        if num_classes is None:
            raise ConfigError('categorical family needs num_classes')
        return Categorical(num_classes)
    elif kind is FamilyKind.NORMAL:
        return Normal()
    else:
        return Poisson()


def to_standard(params: ConjugateParams, fam: ExponentialFamily) -> StandardParams:
    return fam.to_standard(params)


def from_standard(standard: StandardParams, fam: ExponentialFamily) -> ConjugateParams:
    return fam.from_standard(standard)


def expected_log_likelihood(y, post: ConjugateParams, fam: ExponentialFamily):
    """E[log P(y | theta)] under the conjugate distribution ``post``."""
    return fam.expected_log_likelihood(y, post)


def prior_entropy(post: ConjugateParams, fam: ExponentialFamily):
    """Entropy of the conjugate distribution, switching to its large-concentration form at 1e4."""
    return fam.prior_entropy(post)


def target_entropy(target, fam: ExponentialFamily):
    return fam.target_entropy(target)


def posterior_predictive(post: ConjugateParams, fam: ExponentialFamily) -> PredictiveDistribution:
    return fam.posterior_predictive(post)
