"""The posterior network: encoder, latent flow density and input-dependent Bayesian update.

For an input ``x`` the encoder produces a latent ``z``, standardized per dimension. A
linear decoder followed by a family-specific link gives the parameter update
``chi_update``, while the flow density scaled by the certainty budget gives the evidence
``n_update = exp(log_budget + log_prob(z))``. Both are combined with the prior::

    n_post   = n_prior + n_update
    chi_post = (n_prior * chi_prior + n_update * chi_update) / n_post

Far from the training data the flow density, and therefore ``n_update``, vanishes and the
prior takes over."""

import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from . import expfam
from . import tensor as T
from .expfam import ConjugateParams, ExponentialFamily, FamilyKind
from .flows import FlowDensity, FlowSpec
from .log import log
from .tensor import Node, Parameter
from .util import *


#: Evidence updates are clamped to at most 1e12 before the Bayesian update
LOG_EVIDENCE_CAP = math.log(1e12)

ENTROPY_WEIGHT_MAX = 1e-5

LATENT_NORM_EPS = 1e-5


class BudgetMode(Enum):
    UNIT = 'unit'
    DATA_COUNT = 'data_count'
    DIMENSION = 'dimension'


def certainty_budget(dim: int, mode: Union[BudgetMode, str], train_size: Optional[int] = None) -> float:
    """Log of the total evidence ``N_H`` the flow density distributes over the latent space."""
    mode = BudgetMode(mode)
    if dim < 1:
        raise ConfigError(f'latent dimension must be >= 1, got {dim}')
    if mode is BudgetMode.UNIT:
        return 0.0
    elif mode is BudgetMode.DATA_COUNT:
        if not train_size:
            raise ConfigError('data_count budget needs the training set size')
        return math.log(train_size)
    else:
        return 0.5 * (dim * math.log(2 * math.pi) + math.log(dim + 1))


class NatPnConfig(Base):
    family: FamilyKind
    num_classes: Optional[int] #: Only for categorical targets
    input_dim: int
    latent_dim: int #: H
    encoder: List[int] #: Hidden layer widths
    flow: FlowSpec
    prior: ConjugateParams
    entropy_weight: float #: lambda
    budget_mode: BudgetMode
    train_size: Optional[int] #: N, required by the data_count budget

    def __init__(self, family: Union[FamilyKind, str], input_dim: int, latent_dim: int = 16,
                 encoder: Sequence[int] = (64, 64, 64), flow: Union[FlowSpec, str] = 'radial-8',
                 prior: Optional[ConjugateParams] = None, entropy_weight: float = 1e-5,
                 budget_mode: Union[BudgetMode, str] = BudgetMode.DIMENSION,
                 num_classes: Optional[int] = None, train_size: Optional[int] = None):
        self.family = FamilyKind(family)
        self.num_classes = num_classes
        self.input_dim = int(input_dim)
        self.latent_dim = int(latent_dim)
        self.encoder = [int(w) for w in encoder]
        self.flow = flow if isinstance(flow, FlowSpec) else FlowSpec.parse(flow)
        self.entropy_weight = float(entropy_weight)
        self.budget_mode = BudgetMode(budget_mode)
        self.train_size = train_size

        fam = self.make_family()
        self.prior = prior if prior is not None else fam.default_prior()
        self.validate()

    def make_family(self) -> ExponentialFamily:
        return expfam.family(self.family, self.num_classes)

    def validate(self) -> 'NatPnConfig':
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigError('input and latent dimensions must be >= 1')
        if any(w < 1 for w in self.encoder):
            raise ConfigError(f'encoder widths must be >= 1, got {self.encoder}')
        if self.entropy_weight < 0:
            raise ConfigError(f'entropy weight must be >= 0, got {self.entropy_weight}')
        if self.entropy_weight > ENTROPY_WEIGHT_MAX:
            log.warning('entropy weight %g is above the usual range [0, %g]', self.entropy_weight, ENTROPY_WEIGHT_MAX)
        try:
            self.make_family().check(self.prior)
        except DomainError as e:
            raise ConfigError(f'invalid prior: {e}') from None
        if self.prior.n.ndim != 0:
            raise ConfigError('prior must be a single (chi, n) pair')
        certainty_budget(self.latent_dim, self.budget_mode, self.train_size)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            'family': self.family.value,
            'num_classes': self.num_classes,
            'input_dim': self.input_dim,
            'latent_dim': self.latent_dim,
            'encoder': list(self.encoder),
            'flow': str(self.flow),
            'prior': {'chi': self.prior.chi.tolist(), 'n': float(self.prior.n)},
            'entropy_weight': self.entropy_weight,
            'budget_mode': self.budget_mode.value,
            'train_size': self.train_size}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> 'NatPnConfig':
        d = dict(d)
        prior = d.pop('prior', None)
        if prior is not None:
            try:
                prior = ConjugateParams(prior['chi'], prior['n'])
            except (KeyError, TypeError, DimensionError) as e:
                raise ConfigError(f'bad prior: {e}') from None
        unknown = set(d) - {'family', 'num_classes', 'input_dim', 'latent_dim', 'encoder', 'flow',
                            'entropy_weight', 'budget_mode', 'train_size'}
        if unknown:
            raise ConfigError(f'unknown model settings: {", ".join(sorted(unknown))}')
        try:
            return cls(prior=prior, **d)
        except TypeError as e:
            raise ConfigError(f'bad model settings: {e}') from None


class PosteriorPrediction(Base):
    """Posterior parameters for a batch, as (possibly differentiable) nodes."""

    family: ExponentialFamily
    chi_post: Node #: (B, L)
    n_post: Node #: (B,)
    chi_update: Node #: (B, L)
    n_update: Node #: (B,)
    latent_logprob: Node #: (B,)

    def __init__(self, family, chi_post, n_post, chi_update, n_update, latent_logprob):
        self.family = family
        self.chi_post = chi_post
        self.n_post = n_post
        self.chi_update = chi_update
        self.n_update = n_update
        self.latent_logprob = latent_logprob

    @property
    def posterior(self) -> ConjugateParams:
        return ConjugateParams(self.chi_post.value, self.n_post.value)

    def __len__(self):
        return self.n_post.shape[0]


class Uncertainties(Base):
    aleatoric: np.ndarray #: Entropy of the target distribution at the posterior mean
    epistemic: np.ndarray #: Posterior evidence n_post
    predictive: np.ndarray #: Entropy of the posterior distribution


def bayesian_update(prior: ConjugateParams, chi_update: Node, n_update: Node) -> Tuple[Node, Node]:
    n_prior = float(prior.n)
    n_post = n_prior + n_update
    chi_post = (n_prior * prior.chi + T.column(n_update) * chi_update) / T.column(n_post)
    return chi_post, n_post


class LatentNorm(Base):
    """Per-dimension standardization of the encoder output, without a learned scale.

    While training, each batch is standardized with its own statistics and has zero mean
    and unit variance in every latent dimension. Otherwise the stored ``mean`` and ``var``
    are used; :py:meth:`calibrate` sets them from a whole training set."""

    mean: np.ndarray
    var: np.ndarray

    def __init__(self, dim: int):
        self.mean = T.tensor(np.zeros(dim))
        self.var = T.tensor(np.ones(dim))

    def __call__(self, z: Node, training: bool = False) -> Node:
        if training and z.shape[0] > 1:
            centered = z - T.mean(z, axis=0)
            var = T.mean(T.square(centered), axis=0)
            return centered / T.sqrt(var + LATENT_NORM_EPS)
        return (z - self.mean) / np.sqrt(self.var + LATENT_NORM_EPS)

    def calibrate(self, z: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.mean.shape[0] or len(z) == 0:
            raise ContractError(f'latent statistics need a non-empty (N, {self.mean.shape[0]}) batch, got {z.shape}')
        self.mean = T.tensor(z.mean(axis=0))
        self.var = T.tensor(z.var(axis=0))

    def state(self) -> Dict[str, np.ndarray]:
        return {'latent_norm.mean': self.mean, 'latent_norm.var': self.var}

    def load(self, state: Dict[str, np.ndarray]) -> None:
        mean, var = T.tensor(state['latent_norm.mean']), T.tensor(state['latent_norm.var'])
        if mean.shape != self.mean.shape or var.shape != self.var.shape:
            raise DimensionError('latent statistics do not match the latent dimension', self.mean.shape, mean.shape)
        if np.any(~(var >= 0)):
            raise DomainError('latent variances must be non-negative')
        self.mean, self.var = mean, var


def _check_finite(node: Node, stage: str) -> Node:
    if not np.all(np.isfinite(node.value)):
        raise NumericError('non-finite values', stage)
    return node


class NatPnModel(Base):
    config: NatPnConfig
    family: ExponentialFamily
    log_budget: float
    flow: FlowDensity
    latent_norm: LatentNorm
    clamp_count: int #: Evidence updates clamped to the cap so far

    def __init__(self, config: NatPnConfig, seed: int = 0):
        self.config = config.validate()
        self.family = config.make_family()
        self.log_budget = certainty_budget(config.latent_dim, config.budget_mode, config.train_size)
        self.clamp_count = 0

        rng = np.random.default_rng(seed)
        self._encoder: List[Tuple[Parameter, Parameter]] = []
        sizes = [config.input_dim] + config.encoder + [config.latent_dim]
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(6 / n_in)
            self._encoder.append((
                Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f'encoder.{i}.weight'),
                Parameter(np.zeros(n_out), f'encoder.{i}.bias')))
        bound = 1 / math.sqrt(config.latent_dim)
        self._decoder = (
            Parameter(rng.uniform(-bound, bound, size=(config.latent_dim, self.family.decoder_dim)), 'decoder.weight'),
            Parameter(np.zeros(self.family.decoder_dim), 'decoder.bias'))
        self.flow = FlowDensity(config.latent_dim, config.flow, seed=int(rng.integers(2 ** 31)))
        self.latent_norm = LatentNorm(config.latent_dim)

    @property
    def prior(self) -> ConjugateParams:
        return self.config.prior

    @property
    def encoder_parameters(self) -> List[Parameter]:
        return [p for pair in self._encoder for p in pair]

    @property
    def decoder_parameters(self) -> List[Parameter]:
        return list(self._decoder)

    @property
    def flow_parameters(self) -> List[Parameter]:
        return self.flow.parameters

    @property
    def parameters(self) -> List[Parameter]:
        return self.encoder_parameters + self.decoder_parameters + self.flow_parameters

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.parameters}
        state.update(self.latent_norm.state())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters
        names = [p.name for p in params] + list(self.latent_norm.state())
        missing = [name for name in names if name not in state]
        extra = set(state) - set(names)
        if missing or extra:
            raise ContractError(f'state mismatch: missing {missing}, unexpected {sorted(extra)}')
        for p in params:
            p.assign(state[p.name])
        self.latent_norm.load(state)

    def initialize_output(self, targets: np.ndarray) -> None:
        """Start the decoder at the marginal target statistics of the training set."""
        self._decoder[1].assign(self.family.initial_bias(targets))

    def _encoder_output(self, x) -> Node:
        h = x if isinstance(x, Node) else T.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if h.ndim != 2 or h.shape[1] != self.config.input_dim:
            raise DimensionError(f'model expects inputs of dimension {self.config.input_dim}', h.shape)
        last = len(self._encoder) - 1
        for i, (w, b) in enumerate(self._encoder):
            h = T.affine(h, w, b)
            if i < last:
                h = T.leaky_relu(h)
        return _check_finite(h, 'encoder')

    def encode(self, x, training: bool = False) -> Node:
        """Standardized latents of a batch ``x`` (B, D) or a single input vector (D,)."""
        return self.latent_norm(self._encoder_output(x), training)

    def calibrate(self, x, batch_size: int = 1024) -> None:
        """Set the stored latent statistics from the raw encoder output over ``x``."""
        x = np.asarray(x, dtype=np.float64)
        with T.no_grad():
            raw = [self._encoder_output(x[start:start + batch_size]).value for start in range(0, len(x), batch_size)]
        self.latent_norm.calibrate(np.concatenate(raw) if raw else np.empty((0, self.config.latent_dim)))

    def forward(self, x, log_prob_override: Optional[Node] = None, training: bool = False) -> PosteriorPrediction:
        """Posterior parameters for a batch ``x`` of shape (B, D), or a single input of shape (D,).

        ``training`` standardizes the latents with the batch statistics.
        ``log_prob_override`` replaces the flow log-density, for probing the update."""
        z = self.encode(x, training)
        chi_update = _check_finite(self.family.link(T.affine(z, *self._decoder)), 'decoder')
        log_prob = log_prob_override if log_prob_override is not None else self.flow.log_prob(z)
        _check_finite(log_prob, 'flow')

        log_evidence = self.log_budget + log_prob
        capped = log_evidence.value > LOG_EVIDENCE_CAP
        if np.any(capped):
            self.clamp_count += int(capped.sum())
            log.info('evidence: clamped %d update(s) to 1e12', int(capped.sum()))
            log_evidence = T.clip(log_evidence, hi=LOG_EVIDENCE_CAP)
        n_update = T.exp(log_evidence)

        chi_post, n_post = bayesian_update(self.prior, chi_update, n_update)
        _check_finite(chi_post, 'posterior')
        return PosteriorPrediction(self.family, chi_post, n_post, chi_update, n_update, log_prob)

    def predict(self, x, batch_size: int = 1024) -> PosteriorPrediction:
        """Like :py:meth:`forward`, without recording gradients, in batches."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        parts = []
        with T.no_grad():
            for start in range(0, max(len(x), 1), batch_size):
                p = self.forward(x[start:start + batch_size])
                parts.append([p.chi_post, p.n_post, p.chi_update, p.n_update, p.latent_logprob])
        columns = [T.constant(np.concatenate([part[i].value for part in parts])) for i in range(5)]
        return PosteriorPrediction(self.family, *columns)


def uncertainties(pred: PosteriorPrediction, family: Optional[ExponentialFamily] = None) -> Uncertainties:
    family = family or pred.family
    post = pred.posterior
    u = Uncertainties()
    u.aleatoric = np.asarray(family.target_entropy(family.mean_target(post)))
    u.epistemic = post.n.copy()
    u.predictive = np.asarray(family.prior_entropy(post))
    return u


def ensemble_combine(preds: Sequence[PosteriorPrediction], prior: ConjugateParams) -> PosteriorPrediction:
    """Pool the evidence of several members as successive Bayesian updates of one prior.

    Member contributions are sorted before summation, so the result does not depend on
    the order of ``preds``."""
    if not preds:
        raise ContractError('ensemble needs at least one member')
    family = preds[0].family
    if any(p.family != family for p in preds):
        raise ContractError('ensemble members must share one target family')
    if any(len(p) != len(preds[0]) for p in preds):
        raise ContractError('ensemble members must predict the same batch')

    n = np.stack([p.n_update.value for p in preds])
    weighted = np.stack([p.n_update.value[:, None] * p.chi_update.value for p in preds])
    n_total = np.sort(n, axis=0).sum(axis=0)
    weighted_total = np.sort(weighted, axis=0).sum(axis=0)

    n_prior = float(prior.n)
    n_post = n_prior + n_total
    chi_post = (n_prior * prior.chi + weighted_total) / n_post[:, None]
    with np.errstate(invalid='ignore', divide='ignore'):
        chi_update = np.where(n_total[:, None] > 0, weighted_total / n_total[:, None], prior.chi)
    lp = np.sort(np.stack([p.latent_logprob.value for p in preds]), axis=0)
    latent_logprob = logsumexp(lp, axis=0) - math.log(len(preds))
    return PosteriorPrediction(family, *(T.constant(v) for v in (chi_post, n_post, chi_update, n_total, latent_logprob)))


def bayesian_loss(pred: PosteriorPrediction, y, entropy_weight: float, family: Optional[ExponentialFamily] = None) -> Node:
    """Mean over the batch of ``-E[log P(y | theta)] - lambda H(posterior)``."""
    family = family or pred.family
    y = np.atleast_1d(family.check_targets(y))
    if y.shape[0] != len(pred):
        raise DimensionError('targets do not match predictions', y.shape, pred.n_post.shape)
    loss = -family.expected_log_likelihood_node(y, pred.chi_post, pred.n_post)
    if entropy_weight:
        loss = loss - entropy_weight * family.prior_entropy_node(pred.chi_post, pred.n_post)
    return T.mean(loss)
