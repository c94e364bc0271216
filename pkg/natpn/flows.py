"""Normalized densities on the latent space.

A :py:class:`FlowDensity` maps a latent ``z`` through a stack of invertible layers to a
standard-Normal base and adds up the log-determinants, so that ``log_prob`` is an exact,
normalized log-density. Two layer types are available: radial layers and masked
autoregressive (MAF) layers built from MADE networks. Only the density direction is
implemented for MAF."""

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .log import log
from .optim import Adam, restore, snapshot
from .tensor import Node, Parameter
from .util import *


#: MAF log-scales are clamped to [-LOG_SCALE_BOUND, LOG_SCALE_BOUND]
LOG_SCALE_BOUND = 7.0

_LOG_2PI = math.log(2 * math.pi)


class FlowKind(Enum):
    RADIAL = 'radial'
    MAF = 'maf'


class FlowSpec(Base):
    """Flow type and depth, written ``radial-8`` or ``maf-4`` in manifests."""

    kind: FlowKind
    depth: int

    def __init__(self, kind: Union[FlowKind, str], depth: int):
        self.kind = FlowKind(kind)
        if depth < 1:
            raise ConfigError(f'flow depth must be >= 1, got {depth}')
        self.depth = depth

    @classmethod
    def parse(cls, text: str) -> 'FlowSpec':
        kind, _, depth = text.partition('-')
        try:
            return cls(kind, int(depth))
        except ValueError:
            raise ConfigError(f'bad flow spec {text!r} (expected e.g. radial-8 or maf-4)') from None

    def __str__(self):
        return '%s-%d' % (self.kind.value, self.depth)

    def __eq__(self, other):
        return isinstance(other, FlowSpec) and self.kind is other.kind and self.depth == other.depth


class RadialLayer(Base):
    """``g(z) = z + beta h(r) (z - z0)`` with ``h(r) = 1 / (alpha + r)``.

    ``alpha = softplus(alpha_raw)`` and ``beta = -alpha + softplus(beta_raw)``, so
    ``beta >= -alpha`` and the layer stays invertible."""

    z0: Parameter
    alpha_raw: Parameter
    beta_raw: Parameter

    def __init__(self, dim: int, name: str, rng: np.random.Generator, identity: bool = False):
        bound = 1 / math.sqrt(dim)
        self.z0 = Parameter(rng.uniform(-bound, bound, size=dim), f'{name}.z0')
        alpha_raw = rng.uniform(-bound, bound)
        self.alpha_raw = Parameter(alpha_raw, f'{name}.alpha_raw')
        self.beta_raw = Parameter(alpha_raw if identity else rng.uniform(-bound, bound), f'{name}.beta_raw')

    @property
    def parameters(self) -> List[Parameter]:
        return [self.z0, self.alpha_raw, self.beta_raw]

    def _coefficients(self):
        alpha = T.softplus(self.alpha_raw)
        return alpha, T.softplus(self.beta_raw) - alpha

    def forward(self, z: Node) -> Tuple[Node, Node]:
        dim = z.shape[1]
        diff = z - self.z0
        r = T.sqrt(T.sum(T.square(diff), axis=1) + 1e-12)
        alpha, beta = self._coefficients()
        h = 1.0 / (alpha + r)
        bh = beta * h
        out = z + T.column(bh) * diff
        # 1 + beta h + beta h' r with h' = -h^2 simplifies to 1 + alpha beta h^2
        log_det = (dim - 1) * T.log(1.0 + bh) + T.log(1.0 + alpha * beta * h * h)
        return out, log_det

    def inverse(self, y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Invert the layer by bisection on the radius ``r = |z - z0|``."""
        alpha, beta = (float(v.value) for v in self._coefficients())
        z0 = self.z0.value
        y = np.atleast_2d(y)
        out = np.empty_like(y)
        for i, row in enumerate(y):
            target = np.linalg.norm(row - z0)
            # |y - z0| = r (1 + beta / (alpha + r)) is increasing in r
            lo, hi = 0.0, target + abs(beta) + 1.0
            while hi - lo > tol * max(1.0, hi):
                mid = 0.5 * (lo + hi)
                if mid * (1 + beta / (alpha + mid)) < target:
                    lo = mid
                else:
                    hi = mid
            r = 0.5 * (lo + hi)
            out[i] = z0 + (row - z0) / (1 + beta / (alpha + r))
        return out


def build_made_masks(dim: int, hidden: Sequence[int], order: Sequence[int]) -> List[np.ndarray]:
    """Connectivity masks of a MADE network, one per weight matrix, shaped (in, out).

    ``order[i]`` is the position of input ``i`` in the autoregressive ordering. The final
    mask covers one output block of ``dim`` units; outputs with position ``d`` only see
    inputs with position ``< d``."""
    if dim < 1:
        raise ContractError(f'MADE needs dim >= 1, got {dim}')
    order = np.asarray(order)
    if sorted(order.tolist()) != list(range(dim)):
        raise ContractError(f'order must be a permutation of range({dim})')

    degrees = [order]
    for size in hidden:
        degrees.append(np.arange(size) % max(dim - 1, 1))

    masks = []
    for d_in, d_out in zip(degrees[:-1], degrees[1:]):
        masks.append((d_out[None, :] >= d_in[:, None]).astype(np.float64))
    masks.append((order[None, :] > degrees[-1][:, None]).astype(np.float64))
    return masks


class MafLayer(Base):
    """Masked autoregressive layer, density direction: ``u = (z - mu(z)) exp(-s(z))``."""

    order: np.ndarray #: Autoregressive position of each input dimension
    masks: List[np.ndarray]

    def __init__(self, dim: int, name: str, rng: np.random.Generator, order: Sequence[int], hidden: Optional[Sequence[int]] = None):
        hidden = list(hidden) if hidden is not None else [2 * dim, 2 * dim]
        self.order = np.asarray(order)
        self.masks = build_made_masks(dim, hidden, self.order)
        self._dim = dim

        sizes = [dim] + hidden
        self._weights: List[Tuple[Parameter, Parameter]] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0, 1 / math.sqrt(n_in), size=(n_in, n_out))
            self._weights.append((Parameter(w, f'{name}.w{i}'), Parameter(np.zeros(n_out), f'{name}.b{i}')))
        # output layer starts near zero so the layer starts near the identity
        w = rng.normal(0, 0.01, size=(sizes[-1], 2 * dim))
        self._weights.append((Parameter(w, f'{name}.w{len(hidden)}'), Parameter(np.zeros(2 * dim), f'{name}.b{len(hidden)}')))

        out_mask = self.masks[-1]
        self._masks = self.masks[:-1] + [np.concatenate([out_mask, out_mask], axis=1)]

    @property
    def parameters(self) -> List[Parameter]:
        return [p for pair in self._weights for p in pair]

    def shift_and_log_scale(self, z: Node) -> Tuple[Node, Node]:
        h = z
        last = len(self._weights) - 1
        for i, ((w, b), mask) in enumerate(zip(self._weights, self._masks)):
            h = T.affine(h, w * mask, b)
            if i < last:
                h = T.tanh(h)
        mu = h[:, :self._dim]
        s = T.clip(h[:, self._dim:], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        return mu, s

    def forward(self, z: Node) -> Tuple[Node, Node]:
        mu, s = self.shift_and_log_scale(z)
        return (z - mu) * T.exp(-s), -T.sum(s, axis=1)


Layer = Union[RadialLayer, MafLayer]


class FlowDensity(Base):
    """Normalizing flow over a standard Normal base in ``dim`` dimensions."""

    dim: int
    spec: FlowSpec
    layers: List[Layer]

    def __init__(self, dim: int, spec: FlowSpec, seed: int = 0, identity: bool = False):
        if dim < 1:
            raise ConfigError(f'latent dimension must be >= 1, got {dim}')
        self.dim = dim
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers = []
        for i in range(spec.depth):
            name = f'flow.{i}'
            if spec.kind is FlowKind.RADIAL:
                self.layers.append(RadialLayer(dim, name, rng, identity))
            else:
                order = np.arange(dim) if i % 2 == 0 else np.arange(dim)[::-1]
                self.layers.append(MafLayer(dim, name, rng, order))

    @property
    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters]

    def log_prob(self, z) -> Node:
        """Log-density of each row of ``z`` (N, dim); a single ``dim``-vector gives a scalar."""
        z = T.constant(z)
        if not np.all(np.isfinite(z.value)):
            raise DomainError('flow: latent must be finite')
        single = z.ndim == 1
        if single:
            z = T.reshape(z, (1, z.shape[0]))
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f'flow expects latents of dimension {self.dim}', z.shape)

        log_det = None
        for layer in self.layers:
            z, ld = layer.forward(z)
            log_det = ld if log_det is None else log_det + ld
        base = -0.5 * T.sum(T.square(z), axis=1) - 0.5 * self.dim * _LOG_2PI
        out = base if log_det is None else base + log_det
        return out[0] if single else out


def warmup_fit(flow: FlowDensity, latents: np.ndarray, steps: int, lr: float, batch_size: int = 512,
               seed: int = 0, on_epoch: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Fit ``flow`` to fixed latents by maximum likelihood.

    ``steps`` counts passes over the latents. Returns the mean log-likelihood of all
    latents before training and after each pass.

    :raises ContractError: on an empty batch of latents
    :raises TrainingError: if the log-likelihood stops being finite; the error carries
        the last finite flow parameters, which are also restored on the flow"""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or len(latents) == 0:
        raise ContractError('warm-up needs a non-empty (N, H) batch of latents')

    def evaluate() -> float:
        with T.no_grad():
            return float(np.mean(flow.log_prob(latents).value))

    params = flow.parameters
    optimizer = Adam(params, lr)
    rng = np.random.default_rng(seed)
    history = [evaluate()]
    last_good = snapshot(params)

    for epoch in range(steps):
        order = rng.permutation(len(latents))
        for start in range(0, len(latents), batch_size):
            batch = latents[order[start:start + batch_size]]
            with T.Tape():
                loss = -T.mean(flow.log_prob(batch))
                if not np.isfinite(loss.value):
                    restore(params, last_good)
                    raise TrainingError('flow warm-up diverged', checkpoint=last_good)
                try:
                    optimizer.step(T.backward(loss))
                except TrainingError as e:
                    restore(params, last_good)
                    e.checkpoint = last_good
                    raise
        ll = evaluate()
        if not math.isfinite(ll):
            restore(params, last_good)
            raise TrainingError('flow warm-up diverged', checkpoint=last_good)
        last_good = snapshot(params)
        history.append(ll)
        log.debug('flow fit: pass %d, mean log-likelihood %.4f', epoch + 1, ll)
        if on_epoch is not None:
            on_epoch(epoch, ll)
    return history
