"""Evaluation metrics: target error, calibration, OOD detection and confidence decay.

Scores reported in percent (accuracy, Brier, calibration, AUCs) are multiplied by 100."""

import json, math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from .expfam import FamilyKind
from .model import NatPnModel, PosteriorPrediction, Uncertainties, uncertainties
from .util import *


#: Confidence levels p of the regression calibration score
PERCENTILES = tuple(round(0.1 * i, 1) for i in range(1, 10))

SIMPLEX_TOL = 1e-6


def _paired(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ContractError(f'{what}: length mismatch ({len(a)} vs {len(b)})')
    if len(a) == 0:
        raise ContractError(f'{what}: needs at least one sample')
    return a, b


def accuracy(pred_labels, labels) -> float:
    a, b = _paired(pred_labels, labels, 'accuracy')
    return float(np.mean(a == b) * 100)


def rmse(preds, targets) -> float:
    a, b = _paired(preds, targets, 'rmse')
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _one_hot_residual(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels) or len(probs) == 0:
        raise ContractError('brier: need (N, C) probabilities and N labels, N >= 1')
    if np.any(probs < -SIMPLEX_TOL) or np.any(np.abs(probs.sum(axis=1) - 1) > SIMPLEX_TOL):
        raise ContractError('brier: probability rows must lie on the simplex')
    return probs - np.eye(probs.shape[1])[labels]


def brier(probs, labels) -> float:
    """Mean over samples of ``|p - onehot(y)|_2``, divided by the number of classes."""
    residual = _one_hot_residual(probs, labels)
    return float(np.mean(np.linalg.norm(residual, axis=1)) / residual.shape[1] * 100)


def brier_squared(probs, labels) -> float:
    """Classical Brier score: mean squared norm ``|p - onehot(y)|_2^2``."""
    residual = _one_hot_residual(probs, labels)
    return float(np.mean(np.sum(residual ** 2, axis=1)) * 100)


def regression_calibration(cdf_values, percentiles: Sequence[float] = PERCENTILES) -> float:
    """Distance between nominal and observed coverage of symmetric predictive intervals.

    A target with predictive CDF value ``F`` falls outside the central ``1 - p`` interval
    when ``F <= p/2`` or ``F >= 1 - p/2``; the observed frequency of that event is compared
    with ``p``."""
    F = np.asarray(cdf_values, dtype=np.float64)
    if F.size == 0:
        raise ContractError('calibration needs at least one sample')
    if np.any(~((F >= 0) & (F <= 1))):
        raise ContractError('calibration: CDF values must lie in [0, 1]')
    total = 0.0
    for p in percentiles:
        observed = np.mean((F <= p / 2) | (F >= 1 - p / 2))
        total += (p - observed) ** 2
    return float(math.sqrt(total) * 100)


def _detection(scores_id, scores_ood):
    scores_id = np.asarray(scores_id, dtype=np.float64).ravel()
    scores_ood = np.asarray(scores_ood, dtype=np.float64).ravel()
    if scores_id.size == 0 or scores_ood.size == 0:
        raise ContractError('OOD detection needs in- and out-of-distribution scores')
    y = np.concatenate([np.ones(scores_id.size), np.zeros(scores_ood.size)])
    return y, np.concatenate([scores_id, scores_ood])


def auc_pr(scores_id, scores_ood) -> float:
    """Area under the precision-recall curve with in-distribution as the positive class.

    Higher scores must mean "more in-distribution". Precision is interpolated step-wise."""
    y, s = _detection(scores_id, scores_ood)
    return float(average_precision_score(y, s) * 100)


def auc_roc(scores_id, scores_ood) -> float:
    y, s = _detection(scores_id, scores_ood)
    return float(roc_auc_score(y, s) * 100)


class OodScores(Base):
    alea_aucpr: float
    epist_aucpr: float
    alea_aucroc: float
    epist_aucroc: float

    def to_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in ('alea_aucpr', 'epist_aucpr', 'alea_aucroc', 'epist_aucroc')}


def ood_scores(id_unc: Uncertainties, ood_unc: Uncertainties) -> OodScores:
    """Aleatoric scores are negative target entropies, epistemic scores are evidences."""
    s = OodScores()
    s.alea_aucpr = auc_pr(-id_unc.aleatoric, -ood_unc.aleatoric)
    s.alea_aucroc = auc_roc(-id_unc.aleatoric, -ood_unc.aleatoric)
    s.epist_aucpr = auc_pr(id_unc.epistemic, ood_unc.epistemic)
    s.epist_aucroc = auc_roc(id_unc.epistemic, ood_unc.epistemic)
    return s


def confidence_ratio(model: NatPnModel, clean, shifted: Mapping[str, np.ndarray]) -> Dict[str, float]:
    """Mean posterior evidence on each shifted set relative to the clean set."""
    base = float(np.mean(model.predict(clean).n_post.value))
    return {name: float(np.mean(model.predict(X).n_post.value)) / base for name, X in shifted.items()}


class EvalReport(Base):
    dataset: str
    metrics: Dict[str, float] #: accuracy and brier, or rmse and calibration
    ood: Dict[str, OodScores]
    confidence_ratio: Dict[str, float]

    def __init__(self, dataset: str = '', metrics=None, ood=None, confidence_ratio=None):
        self.dataset = dataset
        self.metrics = dict(metrics or {})
        self.ood = dict(ood or {})
        self.confidence_ratio = dict(confidence_ratio or {})

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {'dataset': self.dataset, 'metrics': self.metrics}
        if self.ood:
            d['ood'] = {name: s.to_dict() for name, s in self.ood.items()}
        if self.confidence_ratio:
            d['confidence_ratio'] = self.confidence_ratio
        return d

    def flat(self) -> Dict[str, float]:
        row = dict(self.metrics)
        for name, s in self.ood.items():
            for k, v in s.to_dict().items():
                row[f'ood.{name}.{k}'] = v
        for name, v in self.confidence_ratio.items():
            row[f'confidence_ratio.{name}'] = v
        return row

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        return pd.DataFrame([self.flat()]).to_csv(index=False)


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean (sample standard deviation over sqrt(n))."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def aggregate(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    """Mean and standard error of every flat metric over several runs."""
    if not reports:
        raise ContractError('nothing to aggregate')
    frame = pd.DataFrame([r.flat() for r in reports])
    return {column: {'mean': float(frame[column].mean()), 'sem': sem(frame[column].dropna())}
            for column in frame.columns}


def evaluate(model: NatPnModel, dataset, ood_sets=(), prediction: Optional[PosteriorPrediction] = None,
             predict=None) -> EvalReport:
    """Test-split metrics and OOD detection scores for one model.

    ``predict`` maps inputs to a :py:class:`PosteriorPrediction`; it defaults to
    ``model.predict`` and lets ensembles be evaluated through the same path."""
    predict = predict or model.predict
    family = model.family
    if family.kind is not dataset.family:
        raise ConfigError(f'model predicts {family.kind.value} targets, dataset {dataset.name} has {dataset.family.value}')
    if model.config.input_dim != dataset.input_dim:
        raise ConfigError(f'model expects {model.config.input_dim} features, dataset {dataset.name} has {dataset.input_dim}')

    pred = prediction or predict(dataset.test.X)
    post = pred.posterior
    y = dataset.test.y
    report = EvalReport(dataset.name)

    if family.kind is FamilyKind.CATEGORICAL:
        report.metrics['accuracy'] = accuracy(family.point_prediction(post), y)
        report.metrics['brier'] = brier(post.chi, y)
        report.metrics['brier_squared'] = brier_squared(post.chi, y)
    else:
        point = family.point_prediction(post)
        report.metrics['rmse'] = rmse(dataset.destandardize(point), dataset.destandardize(y))
        cdf = np.clip(family.posterior_predictive(post).cdf(y), 0.0, 1.0)
        report.metrics['calibration'] = regression_calibration(cdf)

    if ood_sets:
        id_unc = uncertainties(pred)
        for ood in ood_sets:
            report.ood[ood.name] = ood_scores(id_unc, uncertainties(predict(ood.X)))
    return report
