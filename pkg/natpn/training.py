"""Optimization schedule: flow warm-up, joint training with early stopping, flow fine-tuning.

Progress can be observed by passing a dict of :py:class:`TrainEvent` keys to handler
functions to :py:func:`fit`."""

from __future__ import annotations

import concurrent.futures, itertools, math, os, time
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import metrics
from . import tensor as T
from .data import Dataset
from .flows import warmup_fit
from .log import log
from .model import NatPnConfig, NatPnModel, bayesian_loss
from .optim import Adam, restore, snapshot
from .util import *


LR_RANGE = (5e-4, 1e-2)

#: Early-stopping patience used for the UCI regression datasets
DATASET_PATIENCE = {'bike_sharing': 50, 'concrete': 50, 'kin8nm': 30}

#: Datasets trained without flow warm-up and fine-tuning
NO_FLOW_PHASES = frozenset({'concrete', 'kin8nm'})


class TrainEvent(Enum):
    """Training events, used as keys for event handlers. Docstrings indicate what each handler receives."""

    EPOCH = 'epoch' #: :py:class:`EpochSummary`:
    PHASE = 'phase' #: :py:class:`Phase`: the phase about to start
    EARLY_STOP = 'early_stop' #: :py:class:`EpochSummary`: the epoch at which training stopped


class Phase(Enum):
    WARMUP = 'warmup'
    JOINT = 'joint'
    FINETUNE = 'finetune'


class EpochSummary(Base):
    phase: Phase
    epoch: int
    train_loss: float #: Mean batch loss (negative mean log-likelihood for the flow phases)
    val_loss: Optional[float]

    def __init__(self, phase, epoch, train_loss, val_loss=None):
        self.phase = phase
        self.epoch = epoch
        self.train_loss = train_loss
        self.val_loss = val_loss


class TrainConfig(Base):
    lr: float
    batch_size: int
    max_epochs: int
    patience: int
    warmup_steps: int #: Flow-only passes before joint training
    finetune_steps: int #: Flow-only passes after joint training
    seed: int

    def __init__(self, lr: float = 1e-3, batch_size: int = 512, max_epochs: int = 1000, patience: int = 50,
                 warmup_steps: int = 200, finetune_steps: int = 200, seed: int = 0):
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.max_epochs = int(max_epochs)
        self.patience = int(patience)
        self.warmup_steps = int(warmup_steps)
        self.finetune_steps = int(finetune_steps)
        self.seed = int(seed)
        self.validate()

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> 'TrainConfig':
        """Defaults for a named dataset: its patience, and no flow phases where they were not used."""
        key = name.lower()
        settings: Dict[str, Any] = {}
        if key in DATASET_PATIENCE:
            settings['patience'] = DATASET_PATIENCE[key]
        if key in NO_FLOW_PHASES:
            settings.update(warmup_steps=0, finetune_steps=0)
        settings.update(overrides)
        return cls(**settings)

    def validate(self) -> 'TrainConfig':
        if self.patience < 1:
            raise ConfigError(f'patience must be >= 1, got {self.patience}')
        if self.batch_size < 1 or self.max_epochs < 0 or self.warmup_steps < 0 or self.finetune_steps < 0:
            raise ConfigError('batch size must be positive and step counts non-negative')
        if not self.lr > 0:
            raise ConfigError(f'learning rate must be > 0, got {self.lr}')
        if not LR_RANGE[0] <= self.lr <= LR_RANGE[1]:
            log.warning('learning rate %g is outside the usual range [%g, %g]', self.lr, *LR_RANGE)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in ('lr', 'batch_size', 'max_epochs', 'patience', 'warmup_steps', 'finetune_steps', 'seed')}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> 'TrainConfig':
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f'bad training settings: {e}') from None


class RunRecord(Base):
    seed: int
    train_loss: List[float] #: Per joint-training epoch
    val_loss: List[float] #: Per joint-training epoch
    best_epoch: int #: Epoch whose parameters were restored, -1 if none ran
    best_val_loss: float
    warmup_loglik: List[float] #: Mean latent log-likelihood before and after each warm-up pass
    finetune_loglik: List[float]
    stopped_early: bool
    wall_time: float #: Seconds
    metrics: Dict[str, Any] #: Final evaluation, filled in by the caller

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.train_loss = []
        self.val_loss = []
        self.best_epoch = -1
        self.best_val_loss = math.inf
        self.warmup_loglik = []
        self.finetune_loglik = []
        self.stopped_early = False
        self.wall_time = 0.0
        self.metrics = {}
        self._best_state: Optional[Dict[str, np.ndarray]] = None

    @property
    def best_state(self) -> Optional[Dict[str, np.ndarray]]:
        return self._best_state

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'best_epoch': self.best_epoch,
            'best_val_loss': self.best_val_loss if math.isfinite(self.best_val_loss) else None,
            'warmup_loglik': self.warmup_loglik,
            'finetune_loglik': self.finetune_loglik,
            'stopped_early': self.stopped_early,
            'wall_time': self.wall_time,
            'metrics': self.metrics}

    def history(self) -> pd.DataFrame:
        return pd.DataFrame({'epoch': range(len(self.train_loss)), 'train_loss': self.train_loss, 'val_loss': self.val_loss})


Handlers = Mapping[TrainEvent, Callable[..., None]]


def _emit(handlers: Optional[Handlers], event: TrainEvent, payload) -> None:
    handler = handlers.get(event) if handlers else None
    if handler:
        handler(payload)


def validation_loss(model: NatPnModel, X: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    """Bayesian loss over a whole split, without recording gradients."""
    total = 0.0
    with T.no_grad():
        for start in range(0, len(X), batch_size):
            xb, yb = X[start:start + batch_size], y[start:start + batch_size]
            total += bayesian_loss(model.forward(xb), yb, model.config.entropy_weight).item() * len(xb)
    return total / len(X)


def _latents(model: NatPnModel, X: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return model.encode(X).value


def _flow_phase(model, X, steps, config, phase, handlers, seed) -> List[float]:
    _emit(handlers, TrainEvent.PHASE, phase)
    log.info('%s: %d flow-only passes', phase.value, steps)
    on_epoch = lambda epoch, ll: _emit(handlers, TrainEvent.EPOCH, EpochSummary(phase, epoch, -ll))
    return warmup_fit(model.flow, _latents(model, X), steps, config.lr, config.batch_size, seed, on_epoch)


def fit(model: NatPnModel, data: Dataset, config: TrainConfig, handlers: Optional[Handlers] = None) -> RunRecord:
    """Train ``model`` on ``data.train`` with early stopping on ``data.val``.

    The parameters with the lowest validation loss are restored before fine-tuning.

    :param handlers: dict of :py:class:`TrainEvent` keys to handler functions
    :raises ConfigError: if the training or validation split is empty
    :raises TrainingError: if the loss or a gradient stops being finite; the error carries
        the last finite parameters, which are also restored on the model"""
    if len(data.train) == 0 or len(data.val) == 0:
        raise ConfigError(f'{data.name}: training and validation splits must be non-empty')
    start_time = time.perf_counter()
    record = RunRecord(config.seed)
    rng = np.random.default_rng(config.seed)
    X, y = data.train.X, data.train.y
    model.initialize_output(y)
    model.calibrate(X)

    if config.warmup_steps:
        record.warmup_loglik = _flow_phase(model, X, config.warmup_steps, config, Phase.WARMUP, handlers, config.seed)

    _emit(handlers, TrainEvent.PHASE, Phase.JOINT)
    log.info('joint training: up to %d epochs, patience %d', config.max_epochs, config.patience)
    params = model.parameters
    optimizer = Adam(params, config.lr)
    last_good = snapshot(params)
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(X))
        batch_losses = []
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            with T.Tape():
                try:
                    loss = bayesian_loss(model.forward(X[idx], training=True), y[idx], model.config.entropy_weight)
                    if not np.isfinite(loss.value):
                        raise TrainingError(f'loss diverged in epoch {epoch}')
                    optimizer.step(T.backward(loss))
                except (TrainingError, NumericError, DomainError) as e:
                    restore(params, last_good)
                    error = e if isinstance(e, TrainingError) else TrainingError(f'epoch {epoch}: {e}')
                    error.checkpoint = last_good
                    raise error from (None if error is e else e)
            batch_losses.append(loss.item())
        last_good = snapshot(params)
        model.calibrate(X)

        val = validation_loss(model, data.val.X, data.val.y)
        record.train_loss.append(float(np.mean(batch_losses)))
        record.val_loss.append(val)
        summary = EpochSummary(Phase.JOINT, epoch, record.train_loss[-1], val)
        log.debug('epoch %d: train %.5f, val %.5f', epoch, summary.train_loss, val)
        _emit(handlers, TrainEvent.EPOCH, summary)

        if val < record.best_val_loss:
            record.best_val_loss = val
            record.best_epoch = epoch
            record._best_state = last_good
        elif epoch - record.best_epoch >= config.patience:
            record.stopped_early = True
            log.info('early stop at epoch %d (best %d, val %.5f)', epoch, record.best_epoch, record.best_val_loss)
            _emit(handlers, TrainEvent.EARLY_STOP, summary)
            break

    if record.best_state is not None:
        restore(params, record.best_state)
        model.calibrate(X)

    if config.finetune_steps:
        record.finetune_loglik = _flow_phase(model, X, config.finetune_steps, config, Phase.FINETUNE, handlers, config.seed + 1)

    record.wall_time = time.perf_counter() - start_time
    return record


class SweepResult(Base):
    best: Dict[str, Any] #: Settings of the selected cell
    best_index: int
    leaderboard: pd.DataFrame

    def __init__(self, best, best_index, leaderboard):
        self.best = best
        self.best_index = best_index
        self.leaderboard = leaderboard


#: Axes a sweep may vary, and whether each belongs to the model or the training settings
SWEEP_AXES = {'latent_dim': 'model', 'flow': 'model', 'entropy_weight': 'model', 'budget_mode': 'model',
              'encoder': 'model', 'lr': 'train'}


def cells(space: Mapping[str, Sequence[Any]], budget: Optional[int] = None) -> List[Dict[str, Any]]:
    """Grid cells in row-major order over the sorted axis names, truncated to ``budget``."""
    unknown = set(space) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f'unknown sweep axes: {", ".join(sorted(unknown))}')
    if not space or any(len(v) == 0 for v in space.values()):
        raise ConfigError('sweep space must have at least one value per axis')
    axes = sorted(space)
    grid = [dict(zip(axes, values)) for values in itertools.product(*(space[a] for a in axes))]
    return grid[:budget] if budget else grid


def _run_cell(args) -> Dict[str, Any]:
    index, overrides, model_settings, train_settings, data = args
    model_d = dict(model_settings)
    train_d = dict(train_settings)
    for key, value in overrides.items():
        (model_d if SWEEP_AXES[key] == 'model' else train_d)[key] = value
    row: Dict[str, Any] = {'cell': index, **{k: str(v) if isinstance(v, list) else v for k, v in overrides.items()}}
    row['seed'] = train_d.get('seed', 0)
    try:
        config = NatPnConfig.from_dict(model_d)
        train = TrainConfig.from_dict(train_d)
        model = NatPnModel(config, seed=train.seed)
        record = fit(model, data, train)
        report = metrics.evaluate(model, data)
    except NatPnError as e:
        log.warning('sweep cell %d (%s) failed: %s', index, overrides, e)
        row.update(status='failed', error=str(e), val_loss=math.nan, wall_time=math.nan)
        return row
    row.update(status='ok', error='', val_loss=record.best_val_loss, wall_time=record.wall_time)
    row.update({f'test_{k}': v for k, v in report.metrics.items()})
    return row


def workers() -> int:
    try:
        return max(1, int(os.environ.get('NATPN_WORKERS', '1')))
    except ValueError:
        raise ConfigError('NATPN_WORKERS must be an integer') from None


def grid_search(space: Mapping[str, Sequence[Any]], data: Dataset, budget: Optional[int] = None,
                model_settings: Optional[Mapping[str, Any]] = None, train_settings: Optional[Mapping[str, Any]] = None) -> SweepResult:
    """Train one model per grid cell and select the lowest validation loss.

    ``budget`` caps the number of cells trained. Failed cells are logged and kept in the
    leaderboard with status ``failed``. Cells run in ``NATPN_WORKERS`` processes.

    :raises TrainingError: if every cell fails"""
    grid = cells(space, budget)
    model_settings = dict(model_settings or {})
    model_settings.setdefault('family', data.family.value)
    model_settings.setdefault('input_dim', data.input_dim)
    model_settings.setdefault('num_classes', data.num_classes)
    model_settings.setdefault('train_size', len(data.train))
    jobs = [(i, cell, model_settings, dict(train_settings or {}), data) for i, cell in enumerate(grid)]

    n = min(workers(), len(jobs))
    log.info('sweep: %d cells on %d worker(s)', len(jobs), n)
    if n > 1:
        with concurrent.futures.ProcessPoolExecutor(n) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]

    board = pd.DataFrame(rows)
    ok = board[board['status'] == 'ok']
    if ok.empty:
        raise TrainingError('every sweep cell failed')
    best_index = int(ok.sort_values(['val_loss', 'cell'], kind='mergesort').iloc[0]['cell'])
    return SweepResult(dict(grid[best_index]), best_index, board)
