"""Command-line front end: ``natpn {train,eval,sweep,plot,ood-report}``.

Exit codes: 0 on success, 2 for invalid manifests, inputs or checkpoints, 3 when training
or evaluation fails numerically."""

from __future__ import annotations

import argparse, json, os, pathlib, sys
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import checkpoint, data, metrics, plot, training
from .data import Dataset, DatasetManifest, OodKind, OodSet, OodSpec
from .log import log, set_verbosity
from .model import NatPnConfig, NatPnModel, ensemble_combine, uncertainties
from .training import TrainConfig
from .util import *


EXIT_OK = 0
EXIT_USER = 2
EXIT_FAILURE = 3

USER_ERRORS = (ConfigError, IngestionError, CheckpointError, ContractError, DomainError, DimensionError)
FAILURES = (TrainingError, NumericError)

_LEFT_OUT = (OodKind.LEFT_OUT_CATEGORY, OodKind.LEFT_OUT_ATTRIBUTE_VALUE)


class ExperimentManifest(Base):
    """Everything needed to reproduce a run, read from one JSON file."""

    path: pathlib.Path #: The manifest file itself
    dataset: Optional[DatasetManifest] #: CSV dataset, or None for a toy
    toy: Optional[Dict[str, Any]] #: make_toys arguments: kind, n, noise, seed
    model: Dict[str, Any] #: NatPnConfig settings; input size and family come from the dataset
    train: Dict[str, Any] #: TrainConfig settings, without the seed
    ood: List[OodSpec]
    shifts: List[OodSpec] #: Inputs for confidence-ratio evaluation
    sweep: Dict[str, Any] #: {'space': {axis: [values]}, 'budget': int}
    out: pathlib.Path
    seeds: List[int]

    @classmethod
    def load(cls, path) -> 'ExperimentManifest':
        path = pathlib.Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f'manifest not found: {path}') from None
        except json.JSONDecodeError as e:
            raise ConfigError(f'{path}: invalid JSON at line {e.lineno}: {e.msg}') from None
        if not isinstance(doc, dict):
            raise ConfigError(f'{path}: manifest must be a JSON object')
        return cls.from_dict(doc, path)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path) -> 'ExperimentManifest':
        path = pathlib.Path(path)
        base = path.parent
        unknown = set(doc) - {'dataset', 'toy', 'model', 'train', 'ood', 'shifts', 'sweep', 'out', 'seeds'}
        if unknown:
            raise ConfigError(f'unknown manifest keys: {", ".join(sorted(unknown))}')

        m = cls()
        m.path = path
        m.dataset = DatasetManifest.from_dict(doc['dataset'], base) if doc.get('dataset') else None
        m.toy = dict(doc['toy']) if doc.get('toy') else None
        if (m.dataset is None) == (m.toy is None):
            raise ConfigError('manifest needs exactly one of dataset or toy')
        m.model = dict(doc.get('model', {}))
        m.train = dict(doc.get('train', {}))
        m.ood = [OodSpec.from_dict(s, base) for s in doc.get('ood', [])]
        m.shifts = [OodSpec.from_dict(s, base) for s in doc.get('shifts', [])]
        if sum(s.kind in _LEFT_OUT for s in m.ood) > 1:
            raise ConfigError('at most one left-out OOD spec per manifest')
        m.sweep = dict(doc.get('sweep', {}))
        m.out = base / doc.get('out', 'runs')
        m.seeds = [int(s) for s in doc.get('seeds', [0])]
        if not m.seeds:
            raise ConfigError('seeds must not be empty')
        return m.validate()

    def validate(self) -> 'ExperimentManifest':
        paths = []
        if self.dataset is not None:
            paths += [self.dataset.path, self.dataset.test_path]
        paths += [s.dataset.path for s in self.ood if s.dataset is not None]
        for p in paths:
            if p is not None and not p.exists():
                raise ConfigError(f'dataset file not found: {p}')
        if 'seed' in self.train:
            raise ConfigError('set seeds at the top level, not in train')
        return self

    def load_data(self) -> Tuple[Dataset, List[OodSet], List[OodSet]]:
        """The in-distribution dataset, its OOD sets and its shifted sets."""
        if self.dataset is not None:
            base = data.load(self.dataset)
        else:
            base = data.make_toys(**self.toy)
        ood_sets: List[OodSet] = []
        for spec in sorted(self.ood, key=lambda s: s.kind not in _LEFT_OUT):
            base, sets = data.make_ood(base, spec)
            ood_sets += sets
        shifted = [s for spec in self.shifts for s in data.make_ood(base, spec)[1]]
        return base, ood_sets, shifted

    def model_config(self, dataset: Dataset, overrides: Optional[Mapping[str, Any]] = None) -> NatPnConfig:
        settings = self.model_settings(dataset)
        settings.update(overrides or {})
        return NatPnConfig.from_dict(settings)

    def model_settings(self, dataset: Dataset) -> Dict[str, Any]:
        settings = dict(self.model)
        settings.update(family=dataset.family.value, input_dim=dataset.input_dim,
                        num_classes=dataset.num_classes, train_size=len(dataset.train))
        return settings

    def train_config(self, dataset: Dataset, seed: int) -> TrainConfig:
        return TrainConfig.for_dataset(dataset.name, **self.train, seed=seed)


def _out_dir(args, manifest: ExperimentManifest) -> pathlib.Path:
    out = pathlib.Path(args.out) if args.out else manifest.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta(dataset: Dataset, seed: int) -> Dict[str, Any]:
    meta: Dict[str, Any] = {'dataset': dataset.name, 'seed': seed}
    if dataset.target_stats is not None:
        meta['target_mean'] = float(dataset.target_stats.mean)
        meta['target_std'] = float(dataset.target_stats.std)
    return meta


def cmd_train(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    dataset, ood_sets, shifted = manifest.load_data()
    out = _out_dir(args, manifest)
    seeds = [args.seed] if args.seed is not None else manifest.seeds

    for seed in seeds:
        model = NatPnModel(manifest.model_config(dataset), seed=seed)
        handlers = {training.TrainEvent.PHASE: lambda phase: log.info('seed %d: %s phase', seed, phase.value)}
        record = training.fit(model, dataset, manifest.train_config(dataset, seed), handlers)
        report = metrics.evaluate(model, dataset, ood_sets)
        if shifted:
            report.confidence_ratio = metrics.confidence_ratio(model, dataset.test.X, {s.name: s.X for s in shifted})
        record.metrics = report.to_dict()

        run_dir = out / f'seed-{seed}'
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint.save(model, run_dir / 'model.ckpt', _meta(dataset, seed))
        (run_dir / 'run.json').write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
        record.history().to_csv(run_dir / 'history.csv', index=False)
        print(f'seed {seed}: best epoch {record.best_epoch}, ' +
              ', '.join('%s %.3f' % kv for kv in report.metrics.items()))
    return EXIT_OK


def _load_members(paths: Sequence[str], dataset: Dataset) -> List[NatPnModel]:
    members = [checkpoint.load(p).model for p in paths]
    for p, m in zip(paths, members):
        if m.family.kind is not dataset.family:
            raise ConfigError(f'{p}: checkpoint predicts {m.family.kind.value} targets, dataset {dataset.name} has {dataset.family.value}')
    return members


def _ensemble_predict(members: Sequence[NatPnModel]):
    prior = members[0].prior
    return lambda X: ensemble_combine([m.predict(X) for m in members], prior)


def cmd_eval(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    dataset, ood_sets, shifted = manifest.load_data()
    out = _out_dir(args, manifest)
    members = _load_members(args.checkpoint, dataset)
    shifts = {s.name: s.X for s in shifted}

    if args.ensemble or len(members) == 1:
        predict = _ensemble_predict(members) if args.ensemble else members[0].predict
        report = metrics.evaluate(members[0], dataset, ood_sets, predict=predict)
        if shifts:
            clean = np.mean(predict(dataset.test.X).n_post.value)
            report.confidence_ratio = {name: float(np.mean(predict(X).n_post.value) / clean) for name, X in shifts.items()}
        (out / 'report.json').write_text(report.to_json())
        (out / 'report.csv').write_text(report.to_csv())
        print(report.to_json())
        return EXIT_OK

    reports = []
    for m in members:
        r = metrics.evaluate(m, dataset, ood_sets)
        if shifts:
            r.confidence_ratio = metrics.confidence_ratio(m, dataset.test.X, shifts)
        reports.append(r)
    summary = metrics.aggregate(reports)
    (out / 'report.json').write_text(json.dumps({
        'dataset': dataset.name,
        'checkpoints': [str(p) for p in args.checkpoint],
        'runs': [r.to_dict() for r in reports],
        'aggregate': summary}, indent=2, sort_keys=True))
    rows = [{'metric': k, 'mean': v['mean'], 'sem': v['sem']} for k, v in summary.items()]
    pd.DataFrame(rows).to_csv(out / 'report.csv', index=False)
    for row in rows:
        print('%-40s %8.2f ± %.2f' % (row['metric'], row['mean'], row['sem']))
    return EXIT_OK


def cmd_sweep(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    dataset, _, _ = manifest.load_data()
    out = _out_dir(args, manifest)
    if 'space' not in manifest.sweep:
        raise ConfigError('manifest has no sweep space')
    seed = args.seed if args.seed is not None else manifest.seeds[0]
    train_settings = manifest.train_config(dataset, seed).to_dict()
    result = training.grid_search(manifest.sweep['space'], dataset, manifest.sweep.get('budget'),
                                  manifest.model_settings(dataset), train_settings)
    result.leaderboard.to_csv(out / 'leaderboard.csv', index=False)
    best = {'cell': result.best_index, 'settings': result.best,
            'val_loss': float(result.leaderboard.loc[result.leaderboard['cell'] == result.best_index, 'val_loss'].iloc[0])}
    (out / 'best.json').write_text(json.dumps(best, indent=2, sort_keys=True))
    print(json.dumps(best, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    dataset, _, _ = manifest.load_data()
    if dataset.input_dim > 2:
        raise ConfigError(f'can only plot inputs of dimension <= 2, got {dataset.input_dim}')
    model = _load_members(args.checkpoint[:1], dataset)[0]
    for path in plot.render(model, dataset, _out_dir(args, manifest)):
        print(path)
    return EXIT_OK


def cmd_ood_report(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    dataset, ood_sets, _ = manifest.load_data()
    if not ood_sets:
        raise ConfigError('manifest has no OOD specs')
    out = _out_dir(args, manifest)
    members = _load_members(args.checkpoint, dataset)
    predict = _ensemble_predict(members) if args.ensemble else members[0].predict

    id_unc = uncertainties(predict(dataset.test.X))
    rows = []
    for ood in ood_sets:
        ood_unc = uncertainties(predict(ood.X))
        scores = metrics.ood_scores(id_unc, ood_unc)
        rows.append({'ood': ood.name, 'kind': ood.kind.value, 'n': len(ood), **scores.to_dict()})
        plot.histograms(id_unc, ood_unc, ood.name, out)
    (out / 'ood.json').write_text(json.dumps(rows, indent=2, sort_keys=True))
    table = pd.DataFrame(rows)
    table.to_csv(out / 'ood.csv', index=False)
    print(table.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'plot': cmd_plot,
    'ood-report': cmd_ood_report}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='natpn', description='Train and evaluate natural posterior networks.')
    p.add_argument('-v', '--verbose', action='count', default=0, help='more logging (repeat for debug output)')
    sub = p.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument('--manifest', required=True, help='experiment manifest (JSON)')
        c.add_argument('--out', help='output directory (default: manifest "out")')
        if name in ('train', 'sweep'):
            c.add_argument('--seed', type=int, help='run only this seed')
        else:
            c.add_argument('--checkpoint', '--checkpoints', action='append', required=True, help='model checkpoint (repeatable)')
            c.add_argument('--ensemble', action='store_true', help='combine the checkpoints as one ensemble')
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parser().parse_args(argv)
    set_verbosity(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except USER_ERRORS as e:
        log.error('%s', e)
        return EXIT_USER
    except FAILURES as e:
        log.error('%s', e)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
