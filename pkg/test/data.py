#!/usr/bin/python3

import pathlib, tempfile, unittest

import numpy as np

from natpn import data
from natpn.data import DatasetManifest, OodKind, OodSpec, SplitSpec, from_arrays, load_csv, make_ood, make_toys
from natpn.expfam import FamilyKind
from natpn.util import ConfigError, IngestionError


class CsvCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text)
        return path

    def schema(self, path, target='y', task='categorical', **kwargs):
        return DatasetManifest('test', path, target, task, **kwargs)


def seasons(n=400, seed=0):
    """Regression rows with a season column 1-4 and two continuous features."""
    rng = np.random.default_rng(seed)
    season = rng.integers(1, 5, size=n).astype(float)
    X = np.column_stack([season, rng.normal(size=n), rng.normal(size=n)])
    y = X[:, 1] - 2 * X[:, 2] + season
    return from_arrays('seasons', 'normal', X, y, feature_names=['season', 'a', 'b'])


class TestSplits(unittest.TestCase):
    def test_fractions(self):
        train, val, test = SplitSpec(seed=1).partition(100)
        self.assertEqual((len(train), len(val), len(test)), (70, 15, 15))
        self.assertEqual(sorted(np.concatenate([train, val, test]).tolist()), list(range(100)))

    def test_dedicated_test(self):
        train, val, test = SplitSpec.dedicated_test().partition(101)
        self.assertEqual((len(train), len(val), len(test)), (81, 20, 0))

    def test_deterministic(self):
        a = SplitSpec(seed=5).partition(50)
        b = SplitSpec(seed=5).partition(50)
        c = SplitSpec(seed=6).partition(50)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        self.assertFalse(np.array_equal(a[0], c[0]))

    def test_bad_fractions(self):
        with self.assertRaises(ConfigError):
            SplitSpec((0.5, 0.5, 0.5))


class TestStandardization(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.X = rng.normal([3.0, -1.0], [2.0, 0.5], size=(200, 2))
        self.y = 10 + 4 * rng.normal(size=200)
        self.d = from_arrays('gauss', 'normal', self.X, self.y)

    def test_training_statistics(self):
        np.testing.assert_allclose(self.d.train.X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(self.d.train.X.std(axis=0), 1.0, rtol=1e-12)
        np.testing.assert_allclose(self.d.train.y.mean(), 0.0, atol=1e-12)

    def test_no_leakage(self):
        X_train, y_train = self.d.raw('train')
        np.testing.assert_allclose(self.d.feature_stats.mean, X_train.mean(axis=0), rtol=1e-12)
        self.assertNotAlmostEqual(float(self.d.feature_stats.mean[0]), float(self.X.mean(axis=0)[0]), places=10)
        self.assertAlmostEqual(self.d.target_scale, float(y_train.std()), places=12)

    def test_destandardize(self):
        _, y_test = self.d.raw('test')
        np.testing.assert_allclose(self.d.destandardize(self.d.test.y), y_test, rtol=1e-12)

    def test_constant_column(self):
        X = np.column_stack([np.ones(50), np.arange(50.0)])
        d = from_arrays('const', 'normal', X, np.arange(50.0))
        np.testing.assert_array_equal(d.train.X[:, 0], np.zeros(len(d.train)))

    def test_counts(self):
        with self.assertRaises(ConfigError):
            from_arrays('counts', 'poisson', np.zeros((20, 1)), np.full(20, -1.0))
        with self.assertRaises(ConfigError):
            from_arrays('counts', 'poisson', np.zeros((20, 1)), np.full(20, 0.5))


class TestCsv(CsvCase):
    def test_categorical(self):
        rows = ''.join('%d,%d,%d\n' % (i, i % 7, 3 + i % 3) for i in range(60))
        path = self.write('ok.csv', 'a,b,y\n' + rows)
        d = load_csv(path, self.schema(path))
        self.assertEqual(d.num_classes, 3)
        self.assertEqual(d.class_labels.tolist(), [3.0, 4.0, 5.0])
        self.assertEqual(d.feature_names, ['a', 'b'])
        self.assertEqual(sum(len(s) for s in d.splits.values()), 60)
        self.assertEqual(set(np.unique(d.train.y)), {0, 1, 2})

    def test_logs_columns(self):
        path = self.write('ok.csv', 'a,y\n' + ''.join('%d,%d\n' % (i, i % 2) for i in range(20)))
        with self.assertLogs('natpn', 'INFO') as cm:
            load_csv(path, self.schema(path))
        self.assertTrue(any('read 20 rows' in line for line in cm.output))
        self.assertTrue(any('column a' in line for line in cm.output))

    def test_drop_and_features(self):
        path = self.write('ok.csv', 'id,a,b,y\n' + ''.join('%d,%d,%d,%d\n' % (i, i, -i, i % 2) for i in range(20)))
        self.assertEqual(load_csv(path, self.schema(path, drop=['id'])).feature_names, ['a', 'b'])
        self.assertEqual(load_csv(path, self.schema(path, features=['b'])).feature_names, ['b'])

    def test_dedicated_test_file(self):
        body = ''.join('%d,%d\n' % (i, i % 2) for i in range(50))
        path = self.write('train.csv', 'a,y\n' + body)
        test = self.write('test.csv', 'a,y\n' + body[:40])
        d = load_csv(path, self.schema(path, test_path=test))
        self.assertEqual((len(d.train), len(d.val), len(d.test)), (40, 10, 10))

    def test_header_only(self):
        path = self.write('empty.csv', 'a,b,y\n')
        with self.assertRaises(IngestionError) as ctx:
            load_csv(path, self.schema(path))
        self.assertEqual(ctx.exception.row, 2)

    def test_empty_file(self):
        path = self.write('nothing.csv', '')
        with self.assertRaises(IngestionError):
            load_csv(path, self.schema(path))

    def test_missing_file(self):
        path = self.dir / 'absent.csv'
        with self.assertRaises(IngestionError) as ctx:
            load_csv(path, self.schema(path))
        self.assertEqual(ctx.exception.filename, str(path))

    def test_non_numeric_cell(self):
        path = self.write('bad.csv', 'a,b,y\n1,2,0\n3,4,1\n5,oops,0\n')
        with self.assertRaises(IngestionError) as ctx:
            load_csv(path, self.schema(path))
        self.assertEqual((ctx.exception.row, ctx.exception.column), (4, 'b'))
        self.assertIn('oops', str(ctx.exception))
        self.assertTrue(str(ctx.exception).startswith(f'Ingestion error ({path} row 4, column b): non-numeric value'))

    def test_missing_column(self):
        path = self.write('ok.csv', 'a,b,y\n1,2,0\n')
        with self.assertRaises(IngestionError) as ctx:
            load_csv(path, self.schema(path, features=['a', 'c']))
        self.assertEqual(ctx.exception.column, 'c')
        with self.assertRaises(IngestionError):
            load_csv(path, self.schema(path, target='label'))

    def test_manifest(self):
        schema = DatasetManifest.from_dict({'name': 'x', 'path': 'data/x.csv', 'target': 'y', 'task': 'poisson'}, self.dir)
        self.assertEqual(schema.path, self.dir / 'data' / 'x.csv')
        self.assertIs(schema.task, FamilyKind.POISSON)
        with self.assertRaises(ConfigError):
            DatasetManifest.from_dict({'name': 'x', 'path': 'x.csv', 'task': 'poisson'})
        with self.assertRaises(ConfigError):
            DatasetManifest.from_dict({'name': 'x', 'path': 'x.csv', 'target': 'y', 'task': 'ordinal'})


class TestToys(unittest.TestCase):
    def test_two_moons(self):
        d = make_toys('two_moons', n=1000, seed=0)
        self.assertEqual((d.family, d.num_classes, d.input_dim), (FamilyKind.CATEGORICAL, 2, 2))
        self.assertEqual((len(d.train), len(d.val), len(d.test)), (700, 150, 150))

    def test_sine_gap(self):
        d = make_toys('sine_regression', n=500, seed=1)
        x = np.concatenate([d.raw(s)[0][:, 0] for s in data.SPLITS])
        self.assertFalse(np.any((x > -1) & (x < 1)))
        self.assertTrue(np.all(np.abs(x) <= 4))
        self.assertEqual(d.meta['gap'], [-1.0, 1.0])

    def test_seeded(self):
        a, b = make_toys('two_moons', n=100, seed=3), make_toys('two_moons', n=100, seed=3)
        np.testing.assert_array_equal(a.train.X, b.train.X)

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            make_toys('spirals')


class TestOod(CsvCase):
    def test_oodom_identity_scale(self):
        d = make_toys('two_moons', n=200)
        base, (ood,) = make_ood(d, OodSpec('oodom_scale', scale=1))
        self.assertIs(base, d)
        np.testing.assert_array_equal(ood.X, d.test.X)
        _, (far,) = make_ood(d, OodSpec('oodom_scale'))
        np.testing.assert_allclose(far.X, 255 * d.test.X)

    def test_gaussian_noise(self):
        d = make_toys('two_moons', n=200)
        _, (ood,) = make_ood(d, OodSpec('gaussian_noise', sigma=2.0, n=50000, seed=1))
        self.assertEqual(ood.X.shape, (50000, 2))
        np.testing.assert_allclose(ood.X.std(axis=0), 2.0, rtol=0.02)
        _, (default,) = make_ood(d, OodSpec('gaussian_noise'))
        self.assertEqual(len(default), len(d.test))

        wide = from_arrays('wide', 'categorical', np.random.default_rng(2).normal(size=(100, 48)), np.arange(100) % 11)
        _, (ood,) = make_ood(wide, OodSpec('gaussian_noise', n=1000, seed=3))
        self.assertEqual(ood.X.shape, (1000, 48))
        self.assertLess(abs(ood.X.std() - 1.0), 3 / np.sqrt(2 * ood.X.size))

    def test_left_out_category(self):
        X = np.random.default_rng(0).normal(size=(300, 2))
        y = np.arange(300) % 3
        d = from_arrays('three', 'categorical', X, y)
        base, (ood,) = make_ood(d, OodSpec('left_out_category', classes=[2]))
        self.assertEqual(base.num_classes, 2)
        self.assertEqual(len(ood), 100)
        self.assertEqual(sum(len(s) for s in base.splits.values()), 200)
        X_train, _ = base.raw('train')
        np.testing.assert_allclose(base.feature_stats.mean, X_train.mean(axis=0))

    def test_left_out_everything(self):
        d = from_arrays('two', 'categorical', np.zeros((40, 1)), np.arange(40) % 2)
        with self.assertRaises(ConfigError):
            make_ood(d, OodSpec('left_out_category', classes=[0, 1]))
        with self.assertRaises(ConfigError):
            make_ood(d, OodSpec('left_out_category', classes=[7]))

    def test_left_out_attribute_value(self):
        d = seasons()
        spec = OodSpec.from_dict({'kind': 'left_out_attribute_value', 'attribute': 'season', 'values': [1, 2],
                                  'labels': {'4': 'winter'}})
        base, sets = make_ood(d, spec)
        self.assertEqual(base.feature_names, ['a', 'b'])
        self.assertEqual([s.name for s in sets], ['season=3', 'winter'])
        season = np.concatenate([d.raw(s)[0][:, 0] for s in data.SPLITS])
        self.assertEqual(len(sets[0]), int(np.sum(season == 3)))
        self.assertEqual(sum(len(s) for s in base.splits.values()), int(np.sum(season <= 2)))
        self.assertEqual(sets[1].X.shape[1], 2)

    def test_unseen_dataset(self):
        d = seasons()
        path = self.write('other.csv', 'season,a,b\n1,0,0\n2,1,1\n')
        spec = OodSpec.from_dict({'kind': 'unseen_dataset', 'dataset': {
            'name': 'other', 'path': 'other.csv', 'target': 'y', 'task': 'normal'}}, self.dir)
        _, (ood,) = make_ood(d, spec)
        np.testing.assert_allclose(ood.X, d.feature_stats.apply(np.array([[1.0, 0, 0], [2.0, 1, 1]])))
        narrow = self.write('narrow.csv', 'a\n1\n')
        spec = OodSpec('unseen_dataset', dataset=DatasetManifest('narrow', narrow, 'y', 'normal'))
        with self.assertRaises(ConfigError):
            make_ood(d, spec)

    def test_spec_validation(self):
        with self.assertRaises(ConfigError):
            OodSpec('left_out_category')
        with self.assertRaises(ConfigError):
            OodSpec('gaussian_noise', sigma=0)
        with self.assertRaises(ConfigError):
            OodSpec.from_dict({'scale': 2})
        self.assertIs(OodSpec('oodom_scale').kind, OodKind.OODOM_SCALE)


if __name__ == '__main__':
    unittest.main()
