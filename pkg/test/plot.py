#!/usr/bin/python3

import json, pathlib, tempfile, unittest

import numpy as np

from natpn import plot
from natpn.data import from_arrays, make_toys
from natpn.model import NatPnConfig, NatPnModel, Uncertainties, uncertainties
from natpn.training import TrainConfig, fit
from natpn.util import ConfigError


def trained(data, family, num_classes=None, latent_dim=2, epochs=200, budget_mode='dimension'):
    config = NatPnConfig(family, data.input_dim, num_classes=num_classes, latent_dim=latent_dim,
                         encoder=[32, 32], flow='radial-8', budget_mode=budget_mode, train_size=len(data.train))
    model = NatPnModel(config, seed=0)
    fit(model, data, TrainConfig(lr=5e-3, batch_size=128, max_epochs=epochs, patience=40, warmup_steps=50, finetune_steps=50))
    return model


class TestGrids(unittest.TestCase):
    def test_two_moons(self):
        data = make_toys('two_moons', n=1000, seed=0)
        model = trained(data, 'categorical', 2)
        grid = plot.classification_grid(model, data, resolution=41)
        predictive = np.asarray(grid['predictive'])
        on_data = uncertainties(model.predict(data.train.X)).predictive
        corners = predictive[[0, 0, -1, -1], [0, -1, 0, -1]]
        self.assertLess(np.median(on_data), grid['prior_predictive'] - 1.0)
        np.testing.assert_allclose(corners, grid['prior_predictive'], atol=0.05)

    def test_sine_gap(self):
        data = make_toys('sine_regression', n=1000, seed=0)
        # a single latent dimension is taken up by sin(x) itself, which the gap also spans
        model = trained(data, 'normal', latent_dim=2, budget_mode='data_count')
        grid = plot.regression_grid(model, data, resolution=401)
        x, evidence = np.asarray(grid['x']), np.asarray(grid['epistemic'])
        gap = evidence[np.abs(x) < 0.25]
        on_data = evidence[(np.abs(x) > 1.5) & (np.abs(x) < 3.5)]
        self.assertLess(np.max(gap), 0.1 * np.median(on_data))
        self.assertTrue(np.all(np.asarray(grid['lower']) < np.asarray(grid['upper'])))


class TestRender(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = pathlib.Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_untrained(self):
        data = make_toys('two_moons', n=100)
        model = NatPnModel(NatPnConfig('categorical', 2, num_classes=2, latent_dim=2, encoder=[8], flow='radial-2'))
        image, values = plot.render(model, data, self.dir, resolution=20)
        self.assertEqual(image.name, 'two_moons.png')
        self.assertGreater(image.stat().st_size, 0)
        self.assertEqual(len(json.loads(values.read_text())['aleatoric']), 20)

    def test_regression(self):
        data = make_toys('sine_regression', n=100)
        model = NatPnModel(NatPnConfig('normal', 1, latent_dim=1, encoder=[8], flow='radial-2'))
        image, values = plot.render(model, data, self.dir, resolution=50)
        self.assertTrue(image.exists())
        self.assertEqual(len(json.loads(values.read_text())['mean']), 50)

    def test_too_many_dimensions(self):
        data = from_arrays('wide', 'normal', np.random.default_rng(0).normal(size=(30, 3)), np.zeros(30))
        model = NatPnModel(NatPnConfig('normal', 3, latent_dim=2, encoder=[8], flow='radial-2'))
        with self.assertRaises(ConfigError):
            plot.render(model, data, self.dir)

    def test_histograms(self):
        model = NatPnModel(NatPnConfig('categorical', 2, num_classes=2, latent_dim=2, encoder=[8], flow='radial-2'))
        X = np.random.default_rng(1).normal(size=(50, 2))
        id_unc, ood_unc = uncertainties(model.predict(X)), uncertainties(model.predict(100 * X))
        image, values = plot.histograms(id_unc, ood_unc, 'oodom', self.dir)
        self.assertEqual(image.name, 'hist-oodom.png')
        self.assertEqual(len(json.loads(values.read_text())['ood']['aleatoric']), 50)

    def test_histograms_of_constant_values(self):
        rng = np.random.default_rng(2)
        id_unc, ood_unc = Uncertainties(), Uncertainties()
        id_unc.aleatoric, id_unc.epistemic = rng.uniform(0, 0.7, 40), rng.uniform(2, 50, 40)
        ood_unc.aleatoric, ood_unc.epistemic = np.full(30, np.log(2)), np.full(30, 2.0)
        image, values = plot.histograms(id_unc, ood_unc, 'oodom', self.dir)
        self.assertGreater(image.stat().st_size, 0)
        self.assertEqual(json.loads(values.read_text())['ood']['log_epistemic'], [np.log(2.0)] * 30)
        image, _ = plot.histograms(ood_unc, ood_unc, 'saturated', self.dir)
        self.assertTrue(image.exists())

    def test_bin_edges(self):
        edges = plot.bin_edges(np.full(10, 7.0), bins=20)
        self.assertEqual(len(edges), 21)
        self.assertTrue(np.all(np.diff(edges) > 0))
        self.assertTrue(edges[0] < 7.0 < edges[-1])
        edges = plot.bin_edges([0.0, 1.0], [5.0, 5.0], bins=10)
        self.assertEqual((edges[0], edges[-1]), (0.0, 5.0))


if __name__ == '__main__':
    unittest.main()
