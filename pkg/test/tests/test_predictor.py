import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'src')))

import json
import shutil
import tempfile
import unittest

import numpy as np

from src import predictor as pr
from src.dataset import ChannelDataset, build_dataset
from src.settings import PredictorHyper, SystemConfig
from src.utils import ShapeError, complex_to_real, real_to_complex

def _small_hyper(**overrides):
    values = dict(w_step=2, epochs=2, batch_size=16, lstm_units=(4, 4), filters=(2, 2, 2))
    values.update(overrides)
    return PredictorHyper(**values)

class MetricTests(unittest.TestCase):
    def test_nmse(self):
        H = np.array([[1.0 + 1j, 0.0], [0.0, 1.0]])
        self.assertEqual(pr.nmse(H, H), 0.0)
        self.assertAlmostEqual(pr.nmse(H, np.zeros_like(H)), 1.0)
        self.assertAlmostEqual(pr.nmse_db(0.1), -10.0)
        self.assertEqual(pr.nmse_db(0.0), float("-inf"))

    def test_nmse_errors(self):
        with self.assertRaises(ValueError):
            pr.nmse(np.zeros((2, 2)), np.ones((2, 2)))
        with self.assertRaises(ShapeError):
            pr.nmse(np.ones((2, 2)), np.ones((2, 3)))

    def test_collect_errors_is_per_device(self):
        H_hat = np.zeros((3, 4, 2), complex)
        H_tilde = np.zeros((3, 4, 2), complex)
        H_tilde[1, :, 1] = 1.0
        e2 = pr.collect_errors(H_hat, H_tilde)
        self.assertEqual(e2.shape, (6, 4))
        np.testing.assert_array_equal(e2[3], -np.ones(4))
        self.assertEqual(np.count_nonzero(e2), 4)

class AssemblyTests(unittest.TestCase):
    def setUp(self):
        T, M, K = 5, 2, 1
        H_hat = np.arange(T, dtype=float)[None, :, None, None] * np.ones((1, T, M, K))
        self.ds = ChannelDataset(H=2 * H_hat + 0j, H_hat=H_hat + 0j, xi=np.zeros((1, K, M, M), complex))

    def test_windows_are_most_recent_first(self):
        samples = pr.assemble_samples(self.ds, 2)
        self.assertEqual(len(samples), 3)
        self.assertEqual(samples.inputs.shape, (3, 2, 4, 1))
        np.testing.assert_array_equal(samples.inputs[0, :, 0, 0], [1.0, 0.0])
        np.testing.assert_array_equal(samples.targets[0, :2, 0], [2.0, 2.0])
        np.testing.assert_array_equal(samples.targets[0, 2:, 0], [0.0, 0.0])

    def test_true_target_and_errors(self):
        samples = pr.assemble_samples(self.ds, 2, target="true")
        np.testing.assert_array_equal(samples.targets[0, :2, 0], [4.0, 4.0])
        with self.assertRaises(ValueError):
            pr.assemble_samples(self.ds, 2, target="future")
        with self.assertRaises(ValueError):
            pr.assemble_samples(self.ds, 5)

class LinearBaselineTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _ar_samples(self, n=60, w=3, rho=0.99):
        rng = np.random.default_rng(8)
        series = np.empty((n + w, 2, 1), complex)
        series[0] = rng.standard_normal((2, 1)) + 1j * rng.standard_normal((2, 1))
        for t in range(1, n + w):
            series[t] = rho * series[t - 1] + 0.05 * (rng.standard_normal((2, 1)) + 1j * rng.standard_normal((2, 1)))
        real = complex_to_real(series)
        inputs = np.array([real[t - w:t][::-1] for t in range(w, n + w)])
        return inputs, real[w:], series[w:]

    def test_recovers_ar1_coefficient(self):
        inputs, targets, _ = self._ar_samples(n=400, w=1, rho=0.9)
        model = pr.fit_lr(inputs, targets)
        self.assertEqual(model.coef.shape, (4, 2))
        np.testing.assert_allclose(model.coef[:, 0], 0.9, atol=0.1)

    def test_prediction_shapes_and_accuracy(self):
        inputs, targets, series = self._ar_samples()
        model = pr.fit_lr(inputs, targets)
        H_tilde = pr.lr_predict(inputs, model)
        self.assertEqual(H_tilde.shape, (60, 2, 1))
        self.assertEqual(pr.lr_predict(inputs[0], model).shape, (2, 1))
        self.assertLess(pr.nmse_report(series, H_tilde)["nmse_db"], -10.0)
        with self.assertRaises(ShapeError):
            pr.lr_predict(inputs[:, :2], model)

    def test_ridge_form_fits_on_the_training_split(self):
        inputs, targets, series = self._ar_samples(n=80)
        fitted = pr.lr_predict(inputs[60:], pr.fit_lr(inputs[:60], targets[:60], ridge=1e-6))
        direct = pr.lr_predict(inputs[60:], 1e-6, train=(inputs[:60], targets[:60]))
        np.testing.assert_array_equal(direct, fitted)
        self.assertLess(pr.nmse_report(series[60:], direct)["nmse_db"], -10.0)
        with self.assertRaises(ValueError):
            pr.lr_predict(inputs, 1e-6)

    def test_constant_history_uses_ridge(self):
        inputs = np.ones((10, 2, 2, 1))
        model = pr.fit_lr(inputs, np.ones((10, 2, 1)))
        np.testing.assert_allclose(pr.lr_predict(inputs, model), np.ones((10, 1, 1)) + 1j * np.ones((10, 1, 1)),
                                   atol=1e-6)

    def test_save_and_load(self):
        inputs, targets, _ = self._ar_samples()
        model = pr.fit_lr(inputs, targets)
        path = pr.save_lr(os.path.join(self.tmp, "lr.json"), model)
        back = pr.load_lr(path)
        np.testing.assert_array_equal(back.coef, model.coef)
        self.assertEqual((back.w_step, back.shape), (model.w_step, model.shape))
        other = os.path.join(self.tmp, "other.json")
        with open(other, "w") as f:
            json.dump({"kind": "vae"}, f)
        with self.assertRaises(ValueError):
            pr.load_lr(other)

    def test_empty_set(self):
        with self.assertRaises(ValueError):
            pr.fit_lr(np.zeros((0, 2, 2, 1)), np.zeros((0, 2, 1)))

class NetworkTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cfg = SystemConfig(n_antennas=4, n_devices=2)
        cls.samples = pr.assemble_samples(build_dataset(cfg, 2, 12, master_seed=2, workers=1), 2)
        cls.tmp = tempfile.mkdtemp()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def test_dlpdn_trains_and_predicts(self):
        model = pr.train_dlpdn(self.samples, _small_hyper(), seed=1)
        self.assertEqual(model.meta["epochs"], 2)
        self.assertTrue(np.isfinite(model.meta["val_nmse"]))
        H_tilde = pr.predict(self.samples.inputs, model)
        self.assertEqual(H_tilde.shape, (len(self.samples), 4, 2))
        self.assertEqual(pr.predict(self.samples.inputs[0], model).shape, (4, 2))
        with self.assertRaises(ShapeError):
            pr.predict(self.samples.inputs[:, :1], model)

    def test_training_is_reproducible(self):
        a = pr.train_dlpdn(self.samples, _small_hyper(epochs=1), seed=4)
        b = pr.train_dlpdn(self.samples, _small_hyper(epochs=1), seed=4)
        np.testing.assert_array_equal(pr.predict(self.samples.inputs, a), pr.predict(self.samples.inputs, b))

    def test_lstm_variant_and_checkpoint(self):
        model = pr.train_dlpdn(self.samples, _small_hyper(variant="lstm", epochs=1), seed=0)
        self.assertNotIn("conv1", model.net.layers)
        path = pr.save_predictor(os.path.join(self.tmp, "lstm.json"), model)
        back = pr.load_predictor(path)
        np.testing.assert_array_equal(pr.predict(self.samples.inputs, back),
                                      pr.predict(self.samples.inputs, model))
        self.assertEqual(back.meta["seed"], 0)

    def test_w_step_mismatch(self):
        with self.assertRaises(ShapeError):
            pr.train_dlpdn(self.samples, _small_hyper(w_step=3))

    def test_dlpdn_shape_error_for_tiny_arrays(self):
        with self.assertRaises(ShapeError):
            pr.build_network(1, 2, 2, _small_hyper())

class EpisodeSplitTests(unittest.TestCase):
    def test_validation_episodes_never_train(self):
        episodes = np.repeat(np.arange(5), 7)
        train_idx, val_idx = pr.split_by_episode(episodes, 0.2, np.random.default_rng(3))
        self.assertEqual(len(train_idx) + len(val_idx), len(episodes))
        self.assertEqual(len(np.unique(episodes[val_idx])), 1)
        self.assertFalse(set(episodes[train_idx]) & set(episodes[val_idx]))

    def test_always_keeps_one_training_episode(self):
        episodes = np.repeat(np.arange(2), 4)
        train_idx, val_idx = pr.split_by_episode(episodes, 0.9, np.random.default_rng(0))
        self.assertEqual(len(np.unique(episodes[train_idx])), 1)
        self.assertEqual(len(np.unique(episodes[val_idx])), 1)

    def test_single_episode_falls_back_to_samples(self):
        train_idx, val_idx = pr.split_by_episode(np.zeros(10, int), 0.2, np.random.default_rng(0))
        self.assertEqual((len(train_idx), len(val_idx)), (8, 2))
        self.assertFalse(set(train_idx) & set(val_idx))

class ResidualPredictorTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cfg = SystemConfig(n_antennas=4, n_devices=2)
        ds = build_dataset(cfg, 6, 30, master_seed=9, workers=1)
        samples = pr.assemble_samples(ds, 2)
        seen = samples.episode < 5
        cls.train = samples.take(np.flatnonzero(seen))
        cls.unseen = samples.take(np.flatnonzero(~seen))

    def _persistence(self, samples):
        return pr.nmse_report(samples.H_hat, real_to_complex(samples.inputs[:, 0]))["nmse"]

    def test_untrained_model_repeats_last_slot(self):
        model = pr.init_model(4, 2, 2, _small_hyper(), seed=0)
        np.testing.assert_allclose(pr.predict(self.unseen.inputs, model),
                                   real_to_complex(self.unseen.inputs[:, 0]), rtol=0, atol=1e-15)

    def test_plain_model_predicts_from_scratch(self):
        model = pr.init_model(4, 2, 2, _small_hyper(residual=False), seed=0)
        self.assertGreater(np.abs(model.net.parameters()["head.W"].data).max(), 0.0)

    def test_unseen_episodes_do_not_lose_to_persistence(self):
        model = pr.train_dlpdn(self.train, _small_hyper(epochs=4), seed=2)
        self.assertTrue(set(model.meta["val_episodes"]) <= set(range(5)))
        report = pr.evaluate_predictor(model, self.unseen)
        self.assertLess(report["nmse_db"], -3.0)
        self.assertLessEqual(report["nmse"], 1.25 * self._persistence(self.unseen))

    def test_constant_channel_is_predicted_almost_exactly(self):
        cfg = SystemConfig(n_antennas=4, n_devices=2, dev_doppler_max_hz=0.0, pilot_power_dbw=60.0)
        samples = pr.assemble_samples(build_dataset(cfg, 3, 12, master_seed=4, workers=1), 2)
        model = pr.train_dlpdn(samples, _small_hyper(), seed=1)
        self.assertLess(pr.evaluate_predictor(model, samples)["nmse"], 1e-3)

if __name__ == "__main__":
    unittest.main()
