"""Uncertainty figures for low-dimensional inputs and OOD score histograms.

Every figure is written together with a JSON file holding the plotted values."""

import json, pathlib
from typing import Any, Dict, List, Optional, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from .data import Dataset
from .expfam import FamilyKind
from .model import NatPnModel, Uncertainties, uncertainties
from .util import *


#: The grid extends this many times the largest absolute training input in each direction
GRID_MARGIN = 3.0

INTERVAL = 0.95

#: Width of the histogram range for (nearly) constant values
MIN_BIN_SPAN = 1e-3


def _extent(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    reach = GRID_MARGIN * np.max(np.abs(X), axis=0)
    return -reach, reach


def classification_grid(model: NatPnModel, dataset: Dataset, resolution: int = 100) -> Dict[str, Any]:
    lo, hi = _extent(dataset.train.X)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    pred = model.predict(np.column_stack([gx.ravel(), gy.ravel()]))
    u = uncertainties(pred)
    shape = gx.shape
    return {
        'x': xs.tolist(), 'y': ys.tolist(),
        'aleatoric': u.aleatoric.reshape(shape).tolist(),
        'predictive': u.predictive.reshape(shape).tolist(),
        'epistemic': u.epistemic.reshape(shape).tolist(),
        'prior_predictive': float(model.family.prior_entropy(model.prior))}


def regression_grid(model: NatPnModel, dataset: Dataset, resolution: int = 400) -> Dict[str, Any]:
    lo, hi = _extent(dataset.train.X)
    xs = np.linspace(lo[0], hi[0], resolution)
    pred = model.predict(xs[:, None])
    post = pred.posterior
    lower, upper = model.family.posterior_predictive(post).interval(INTERVAL)
    return {
        'x': dataset.feature_stats.invert(xs[:, None])[:, 0].tolist(),
        'mean': dataset.destandardize(model.family.point_prediction(post)).tolist(),
        'lower': dataset.destandardize(lower).tolist(),
        'upper': dataset.destandardize(upper).tolist(),
        'epistemic': post.n.tolist()}


def _classification_figure(grid, dataset: Dataset, path: pathlib.Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    X = dataset.train.X
    for ax, key, title in zip(axes, ('aleatoric', 'predictive'), ('Aleatoric', 'Predictive')):
        mesh = ax.pcolormesh(grid['x'], grid['y'], np.asarray(grid[key]), shading='auto', cmap='viridis')
        ax.scatter(X[:, 0], X[:, 1], c=dataset.train.y, s=4, cmap='coolwarm', edgecolors='none')
        ax.set_title(f'{title} uncertainty')
        fig.colorbar(mesh, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _regression_figure(grid, dataset: Dataset, path: pathlib.Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x_train, y_train = dataset.raw('train')
    ax.scatter(x_train[:, 0], y_train, s=4, color='black', label='train')
    ax.plot(grid['x'], grid['mean'], color='tab:blue', label='mean')
    ax.fill_between(grid['x'], grid['lower'], grid['upper'], color='tab:blue', alpha=0.25,
                    label='%d%% predictive interval' % round(INTERVAL * 100))
    ax.legend(loc='upper left')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render(model: NatPnModel, dataset: Dataset, out_dir, resolution: Optional[int] = None) -> List[pathlib.Path]:
    """Write the uncertainty landscape of ``model`` over ``dataset``'s input space.

    :raises ConfigError: for inputs with more than two dimensions, or one-dimensional classification"""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset.input_dim > 2:
        raise ConfigError(f'can only plot inputs of dimension <= 2, got {dataset.input_dim}')

    if dataset.family is FamilyKind.CATEGORICAL:
        if dataset.input_dim != 2:
            raise ConfigError('classification plots need two input dimensions')
        grid = classification_grid(model, dataset, resolution or 100)
        draw = _classification_figure
    else:
        if dataset.input_dim != 1:
            raise ConfigError('regression plots need one input dimension')
        grid = regression_grid(model, dataset, resolution or 400)
        draw = _regression_figure

    image = out / f'{dataset.name}.png'
    values = out / f'{dataset.name}.json'
    draw(grid, dataset, image)
    values.write_text(json.dumps(grid))
    return [image, values]


def bin_edges(*groups, bins: int = 50) -> np.ndarray:
    """Shared histogram edges over every finite value in ``groups``.

    Values spread over less than ``MIN_BIN_SPAN`` get a fixed range of that width around
    their center, so constant values still make finite-sized bins."""
    values = np.concatenate([np.ravel(np.asarray(g, dtype=np.float64)) for g in groups])
    values = values[np.isfinite(values)]
    if values.size == 0:
        return np.linspace(-0.5 * MIN_BIN_SPAN, 0.5 * MIN_BIN_SPAN, bins + 1)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < MIN_BIN_SPAN:
        center = 0.5 * (lo + hi)
        half = 0.5 * max(MIN_BIN_SPAN, 1e-6 * abs(center))
        return np.linspace(center - half, center + half, bins + 1)
    return np.histogram_bin_edges(values, bins=bins)


def histograms(id_unc: Uncertainties, ood_unc: Uncertainties, name: str, out_dir, bins: int = 50) -> List[pathlib.Path]:
    """Histograms of log-evidence and aleatoric entropy for in- vs out-of-distribution inputs."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = {
        'id': {'log_epistemic': np.log(id_unc.epistemic).tolist(), 'aleatoric': id_unc.aleatoric.tolist()},
        'ood': {'log_epistemic': np.log(ood_unc.epistemic).tolist(), 'aleatoric': ood_unc.aleatoric.tolist()}}

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, title in zip(axes, ('log_epistemic', 'aleatoric'), ('log evidence', 'aleatoric entropy')):
        edges = bin_edges(values['id'][key], values['ood'][key], bins=bins)
        ax.hist(values['id'][key], bins=edges, alpha=0.6, density=True, label='in distribution')
        ax.hist(values['ood'][key], bins=edges, alpha=0.6, density=True, label=name)
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    image = out / f'hist-{name}.png'
    fig.savefig(image, dpi=100)
    plt.close(fig)

    data = out / f'hist-{name}.json'
    data.write_text(json.dumps(values))
    return [image, data]
