"""Adam, without learning-rate scheduling."""

from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from .tensor import Parameter, Tensor
from .util import *


BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class AdamState(Base):
    """First and second moment estimates, keyed by parameter name."""

    step: int #: Number of updates applied so far
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    def __init__(self, step: int = 0, m=None, v=None):
        self.step = step
        self.m = m if m is not None else {}
        self.v = v if v is not None else {}


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """Apply one Adam update to ``params``. Neither ``params`` nor ``state`` is mutated.

    Parameters without an entry in ``grads`` are treated as having zero gradient.

    :raises TrainingError: if a gradient contains NaN or infinity, naming the parameter"""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f'gradient for unknown parameter {name}')
        if g.shape != params[name].shape:
            raise DimensionError(f'gradient shape of {name}', params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f'non-finite gradient for {name}', parameter=name)

    t = state.step + 1
    m, v, out = {}, {}, {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m[name] = BETA1 * state.m.get(name, 0.0) + (1 - BETA1) * g
        v[name] = BETA2 * state.v.get(name, 0.0) + (1 - BETA2) * g * g
        m_hat = m[name] / (1 - BETA1 ** t)
        v_hat = v[name] / (1 - BETA2 ** t)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + EPS)
    return out, AdamState(t, m, v)


def snapshot(params: Sequence[Parameter]) -> Dict[str, np.ndarray]:
    return {p.name: p.value for p in params}


def restore(params: Sequence[Parameter], state: Mapping[str, np.ndarray]) -> None:
    for p in params:
        p.assign(state[p.name])


class Adam(Base):
    """Stateful wrapper over :py:func:`adam_step` for a fixed group of parameters."""

    lr: float
    state: AdamState

    def __init__(self, params: Sequence[Parameter], lr: float):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError('parameter names must be unique')
        self._params = list(params)
        self.lr = lr
        self.state = AdamState()

    @property
    def params(self):
        return self._params

    def step(self, grads: Mapping[Parameter, Tensor]) -> None:
        """Update every parameter in place from the gradients returned by :py:func:`natpn.tensor.backward`.

        On failure the parameters keep their last finite values, which are attached to the error."""
        values = snapshot(self._params)
        by_name = {p.name: grads[p] for p in self._params if p in grads}
        try:
            updated, self.state = adam_step(values, by_name, self.state, self.lr)
        except TrainingError as e:
            e.checkpoint = values
            raise
        restore(self._params, updated)
