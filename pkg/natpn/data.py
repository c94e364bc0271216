"""Tabular datasets, splits, toy generators and out-of-distribution sets.

Features are standardized with statistics of the training split only. Regression targets
of the Normal task are standardized the same way; count targets are left as they are."""

from __future__ import annotations

import math, os, pathlib
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons

from .expfam import FamilyKind
from .log import log
from .util import *


#: Default factor for OODom inputs
OODOM_SCALE = 255.0

SPLITS = ('train', 'val', 'test')


class Split(Base):
    X: np.ndarray #: Standardized features, (N, D)
    y: np.ndarray #: Targets (standardized for Normal tasks)

    def __init__(self, X, y):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y)

    def __len__(self):
        return len(self.X)


class Stats(Base):
    mean: np.ndarray
    std: np.ndarray

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def of(cls, values: np.ndarray) -> 'Stats':
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


class SplitSpec(Base):
    """Either train/val/test fractions or, with a dedicated test file, train/val of the remainder."""

    fractions: Tuple[float, float, float]
    seed: int

    def __init__(self, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0):
        if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
            raise ConfigError(f'split fractions must be three non-negative numbers summing to 1, got {fractions}')
        self.fractions = tuple(float(f) for f in fractions)
        self.seed = seed

    @classmethod
    def dedicated_test(cls, seed: int = 0) -> 'SplitSpec':
        return cls((0.8, 0.2, 0.0), seed)

    def partition(self, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        order = np.random.default_rng(self.seed).permutation(n)
        n_train = int(round(self.fractions[0] * n))
        n_val = int(round(self.fractions[1] * n)) if self.fractions[2] else n - n_train
        return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


class Dataset(Base):
    name: str
    family: FamilyKind
    num_classes: Optional[int]
    class_labels: Optional[np.ndarray] #: Original label of each class index
    feature_names: List[str]
    train: Split
    val: Split
    test: Split
    feature_stats: Stats
    target_stats: Optional[Stats] #: Only for standardized (Normal) targets
    meta: Dict[str, Any]

    def __init__(self):
        self.meta = {}
        self._raw: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def input_dim(self) -> int:
        return self.train.X.shape[1]

    @property
    def splits(self) -> Dict[str, Split]:
        return {'train': self.train, 'val': self.val, 'test': self.test}

    def raw(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """Features and targets of a split in original units and labels."""
        return self._raw[split]

    def destandardize(self, y: np.ndarray) -> np.ndarray:
        return self.target_stats.invert(y) if self.target_stats is not None else np.asarray(y, dtype=np.float64)

    @property
    def target_scale(self) -> float:
        return float(self.target_stats.std) if self.target_stats is not None else 1.0


def assemble(name: str, family: Union[FamilyKind, str], raw: Mapping[str, Tuple[np.ndarray, np.ndarray]],
             feature_names: Sequence[str], class_labels: Optional[Sequence] = None) -> Dataset:
    """Build a :py:class:`Dataset` from raw per-split arrays, standardizing with the training split.

    For categorical tasks ``raw`` targets are original labels, mapped to indices through
    ``class_labels`` (default: the sorted labels seen in any split)."""
    family = FamilyKind(family)
    if len(raw['train'][0]) == 0:
        raise ConfigError(f'{name}: training split is empty')

    d = Dataset()
    d.name = name
    d.family = family
    d.feature_names = list(feature_names)
    d.feature_stats = Stats.of(np.asarray(raw['train'][0], dtype=np.float64))
    d.target_stats = None
    d.class_labels = None
    d.num_classes = None

    if family is FamilyKind.CATEGORICAL:
        labels = class_labels if class_labels is not None else np.unique(np.concatenate([raw[s][1] for s in SPLITS]))
        d.class_labels = np.asarray(labels)
        d.num_classes = len(d.class_labels)
        lookup = {label: i for i, label in enumerate(d.class_labels.tolist())}
        convert = lambda y: np.array([lookup[v] for v in np.asarray(y).tolist()], dtype=np.int64)
    elif family is FamilyKind.NORMAL:
        d.target_stats = Stats.of(np.asarray(raw['train'][1], dtype=np.float64))
        convert = d.target_stats.apply
    else:
        y_all = np.concatenate([np.asarray(raw[s][1], dtype=np.float64) for s in SPLITS])
        if np.any(y_all < 0) or np.any(y_all != np.round(y_all)):
            raise ConfigError(f'{name}: count targets must be non-negative integers')
        convert = lambda y: np.asarray(y, dtype=np.float64)

    d._raw = {}
    for split in SPLITS:
        X, y = raw[split]
        X = np.asarray(X, dtype=np.float64).reshape(len(X), len(d.feature_names))
        d._raw[split] = (X, np.asarray(y))
        setattr(d, split, Split(d.feature_stats.apply(X), convert(y)))
    return d


def from_arrays(name: str, family: Union[FamilyKind, str], X: np.ndarray, y: np.ndarray,
                split: Optional[SplitSpec] = None, feature_names: Optional[Sequence[str]] = None,
                test: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if test is not None:
        split = split or SplitSpec.dedicated_test()
    split = split or SplitSpec()
    train, val, rest = split.partition(len(X))
    raw = {'train': (X[train], y[train]), 'val': (X[val], y[val])}
    raw['test'] = test if test is not None else (X[rest], y[rest])
    names = list(feature_names) if feature_names is not None else ['x%d' % i for i in range(X.shape[1])]
    d = assemble(name, family, raw, names)
    d.meta['split_seed'] = split.seed
    return d


class DatasetManifest(Base):
    """Where a CSV lives and how to read it."""

    name: str
    path: pathlib.Path
    target: str #: Target column
    task: FamilyKind
    features: Optional[List[str]] #: Feature columns; default is every other column
    drop: List[str] #: Columns to ignore
    split_seed: int
    test_path: Optional[pathlib.Path] #: Dedicated test file, if the source ships one

    def __init__(self, name, path, target, task, features=None, drop=(), split_seed=0, test_path=None):
        self.name = name
        self.path = pathlib.Path(path)
        self.target = target
        self.task = FamilyKind(task)
        self.features = list(features) if features is not None else None
        self.drop = list(drop)
        self.split_seed = int(split_seed)
        self.test_path = pathlib.Path(test_path) if test_path is not None else None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Union[str, os.PathLike, None] = None) -> 'DatasetManifest':
        d = dict(d)
        base = pathlib.Path(base_dir) if base_dir is not None else pathlib.Path('.')
        for key in ('name', 'path', 'target', 'task'):
            if key not in d:
                raise ConfigError(f'dataset manifest is missing {key!r}')
        for key in ('path', 'test_path'):
            if d.get(key) is not None:
                d[key] = base / os.path.expandvars(d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f'bad dataset manifest: {e}') from None

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'path': str(self.path), 'target': self.target, 'task': self.task.value,
                'features': self.features, 'drop': self.drop, 'split_seed': self.split_seed,
                'test_path': str(self.test_path) if self.test_path else None}


def _read_table(path: pathlib.Path, schema: DatasetManifest, target: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray], List[str]]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise IngestionError('file not found', filename=str(path)) from None
    except pd.errors.EmptyDataError:
        raise IngestionError('file is empty', filename=str(path)) from None
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise IngestionError(str(e).strip(), filename=str(path)) from None

    if len(frame) == 0:
        raise IngestionError('no data rows', filename=str(path), row=2)

    columns = [c for c in frame.columns if c != schema.target and c not in schema.drop]
    features = schema.features if schema.features is not None else columns
    wanted = list(features) + ([schema.target] if target else [])
    for column in wanted:
        if column not in frame.columns:
            raise IngestionError('missing column', filename=str(path), column=column)

    values = {}
    for column in wanted:
        raw = frame[column].str.strip()
        parsed = pd.to_numeric(raw, errors='coerce')
        bad = np.flatnonzero(parsed.isna().to_numpy())
        if bad.size:
            # +2: one for the header line, one for 1-based numbering
            row = int(bad[0]) + 2
            raise IngestionError(f'non-numeric value {raw.iloc[bad[0]]!r}', filename=str(path), row=row, column=column)
        values[column] = parsed.to_numpy(dtype=np.float64)

    X = np.column_stack([values[c] for c in features]) if features else np.empty((len(frame), 0))
    y = values[schema.target] if target else None
    return X, y, list(features)


def load_csv(path: Union[str, os.PathLike], schema: DatasetManifest) -> Dataset:
    """Read, standardize and split a headered CSV.

    :raises IngestionError: for a missing file or column, a header-only file or a non-numeric
        cell, naming the row and column where possible"""
    path = pathlib.Path(path)
    X, y, features = _read_table(path, schema)
    log.info('%s: read %d rows, %d features from %s', schema.name, len(X), len(features), path)

    test = None
    split = SplitSpec(seed=schema.split_seed)
    if schema.test_path is not None:
        X_test, y_test, _ = _read_table(schema.test_path, schema)
        test = (X_test, y_test)
        split = SplitSpec.dedicated_test(schema.split_seed)
    if schema.task is FamilyKind.CATEGORICAL and np.any(y != np.round(y)):
        raise IngestionError('class labels must be integers', filename=str(path), column=schema.target)

    d = from_arrays(schema.name, schema.task, X, y, split, features, test)
    for name, mean, std in zip(features, d.feature_stats.mean, d.feature_stats.std):
        log.info('%s: column %s: mean %.4g, std %.4g', schema.name, name, mean, std)
    return d


def load(schema: DatasetManifest) -> Dataset:
    return load_csv(schema.path, schema)


class ToyKind(Enum):
    TWO_MOONS = 'two_moons'
    SINE_REGRESSION = 'sine_regression'


#: x-intervals of the sine regression toy; nothing is sampled in between
SINE_INTERVALS = ((-4.0, -1.0), (1.0, 4.0))


def make_toys(kind: Union[ToyKind, str], n: int = 1000, noise: float = 0.1, seed: int = 0) -> Dataset:
    kind = ToyKind(kind)
    if n < 10:
        raise ConfigError(f'toy datasets need n >= 10, got {n}')

    if kind is ToyKind.TWO_MOONS:
        X, y = make_moons(n_samples=n, noise=noise or None, random_state=seed)
        d = from_arrays('two_moons', FamilyKind.CATEGORICAL, X, y, SplitSpec(seed=seed), ['x0', 'x1'])
    else:
        rng = np.random.default_rng(seed)
        (a, b), (c, e) = SINE_INTERVALS
        side = rng.random(n) < 0.5
        x = np.where(side, rng.uniform(a, b, n), rng.uniform(c, e, n))
        y = np.sin(3 * x) * x + noise * rng.standard_normal(n)
        d = from_arrays('sine_regression', FamilyKind.NORMAL, x[:, None], y, SplitSpec(seed=seed), ['x'])
        d.meta['gap'] = [b, c]
    d.meta.update(toy=kind.value, n=n, noise=noise, seed=seed)
    return d


class OodKind(Enum):
    LEFT_OUT_CATEGORY = 'left_out_category'
    LEFT_OUT_ATTRIBUTE_VALUE = 'left_out_attribute_value'
    OODOM_SCALE = 'oodom_scale'
    GAUSSIAN_NOISE = 'gaussian_noise'
    UNSEEN_DATASET = 'unseen_dataset'


class OodSpec(Base):
    kind: OodKind
    name: str
    classes: List[Any] #: left_out_category: original labels to hold out
    attribute: Optional[str] #: left_out_attribute_value: column to filter on
    values: List[Any] #: left_out_attribute_value: attribute values kept in distribution
    labels: Dict[str, str] #: left_out_attribute_value: display name per held-out value
    scale: float #: oodom_scale: factor on standardized inputs
    sigma: float #: gaussian_noise: standard deviation
    n: Optional[int] #: gaussian_noise: sample count (default: test size)
    seed: int
    dataset: Optional[DatasetManifest] #: unseen_dataset: the other CSV

    def __init__(self, kind, name=None, classes=(), attribute=None, values=(), labels=None, scale=OODOM_SCALE,
                 sigma=1.0, n=None, seed=0, dataset=None):
        self.kind = OodKind(kind)
        self.name = name or self.kind.value
        self.classes = list(classes)
        self.attribute = attribute
        self.values = list(values)
        self.labels = dict(labels or {})
        self.scale = float(scale)
        self.sigma = float(sigma)
        self.n = n
        self.seed = int(seed)
        self.dataset = dataset

        if self.kind is OodKind.LEFT_OUT_CATEGORY and not self.classes:
            raise ConfigError('left_out_category needs classes')
        if self.kind is OodKind.LEFT_OUT_ATTRIBUTE_VALUE and (self.attribute is None or not self.values):
            raise ConfigError('left_out_attribute_value needs attribute and values')
        if self.kind is OodKind.UNSEEN_DATASET and self.dataset is None:
            raise ConfigError('unseen_dataset needs a dataset manifest')
        if self.sigma <= 0:
            raise ConfigError('gaussian_noise needs sigma > 0')

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir=None) -> 'OodSpec':
        d = dict(d)
        if 'kind' not in d:
            raise ConfigError('OOD spec is missing kind')
        if d.get('dataset') is not None:
            d['dataset'] = DatasetManifest.from_dict(d['dataset'], base_dir)
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f'bad OOD spec: {e}') from None


class OodSet(Base):
    name: str
    kind: OodKind
    X: np.ndarray #: Standardized with the in-distribution training statistics

    def __init__(self, name, kind, X):
        self.name = name
        self.kind = kind
        self.X = np.asarray(X, dtype=np.float64)

    def __len__(self):
        return len(self.X)


def _raw_splits(base: Dataset) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    return {s: base.raw(s) for s in SPLITS}


def _left_out_category(base: Dataset, spec: OodSpec) -> Tuple[Dataset, List[OodSet]]:
    if base.family is not FamilyKind.CATEGORICAL:
        raise ConfigError('left_out_category needs a categorical dataset')
    unknown = set(spec.classes) - set(base.class_labels.tolist())
    if unknown:
        raise ConfigError(f'unknown classes to leave out: {sorted(unknown)}')
    raw = _raw_splits(base)
    kept, held = {}, []
    for split, (X, y) in raw.items():
        out = np.isin(y, spec.classes)
        kept[split] = (X[~out], y[~out])
        held.append(X[out])
    if len(kept['train'][0]) == 0:
        raise ConfigError(f'leaving out {spec.classes} empties the training set')
    labels = [c for c in base.class_labels.tolist() if c not in spec.classes]
    d = assemble(base.name, base.family, kept, base.feature_names, labels)
    d.meta = dict(base.meta)
    return d, [OodSet(spec.name, spec.kind, d.feature_stats.apply(np.concatenate(held)))]


def _left_out_attribute_value(base: Dataset, spec: OodSpec) -> Tuple[Dataset, List[OodSet]]:
    if spec.attribute not in base.feature_names:
        raise ConfigError(f'unknown attribute {spec.attribute!r}')
    column = base.feature_names.index(spec.attribute)
    names = [n for i, n in enumerate(base.feature_names) if i != column]
    raw = _raw_splits(base)

    kept, held = {}, {}
    for split, (X, y) in raw.items():
        attr = X[:, column]
        inside = np.isin(attr, spec.values)
        kept[split] = (np.delete(X[inside], column, axis=1), y[inside])
        for value in np.unique(attr[~inside]):
            rows = np.delete(X[attr == value], column, axis=1)
            held.setdefault(value, []).append(rows)
    if len(kept['train'][0]) == 0:
        raise ConfigError(f'keeping {spec.attribute} in {spec.values} empties the training set')

    labels = base.class_labels.tolist() if base.class_labels is not None else None
    d = assemble(base.name, base.family, kept, names, labels)
    d.meta = dict(base.meta)
    sets = []
    for value in sorted(held):
        label = spec.labels.get(str(int(value)) if float(value).is_integer() else str(value), '%s=%g' % (spec.attribute, value))
        sets.append(OodSet(label, spec.kind, d.feature_stats.apply(np.concatenate(held[value]))))
    return d, sets


def make_ood(base: Dataset, spec: OodSpec) -> Tuple[Dataset, List[OodSet]]:
    """Build out-of-distribution inputs for ``base``.

    Returns the in-distribution dataset to train and evaluate on (a reduced copy for the
    left-out kinds, ``base`` otherwise) and the OOD sets, already standardized with that
    dataset's training statistics.

    :raises ConfigError: if the held-out selection leaves no training data"""
    if spec.kind is OodKind.LEFT_OUT_CATEGORY:
        return _left_out_category(base, spec)
    elif spec.kind is OodKind.LEFT_OUT_ATTRIBUTE_VALUE:
        return _left_out_attribute_value(base, spec)
    elif spec.kind is OodKind.OODOM_SCALE:
        return base, [OodSet(spec.name, spec.kind, base.test.X * spec.scale)]
    elif spec.kind is OodKind.GAUSSIAN_NOISE:
        n = spec.n if spec.n is not None else len(base.test)
        X = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, size=(n, base.input_dim))
        return base, [OodSet(spec.name, spec.kind, X)]
    else:
        schema = spec.dataset
        X, _, features = _read_table(schema.path, schema, target=False)
        if len(features) != base.input_dim:
            raise ConfigError(f'{schema.name} has {len(features)} features, {base.name} has {base.input_dim}')
        log.info('%s: read %d unseen-dataset rows from %s', spec.name, len(X), schema.path)
        return base, [OodSet(spec.name, spec.kind, base.feature_stats.apply(X))]
