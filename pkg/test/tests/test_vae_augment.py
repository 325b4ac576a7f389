import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'src')))

import shutil
import tempfile
import unittest
from unittest.mock import MagicMock

import numpy as np

from src import nn_core as nn
from src import vae_augment as va
from src.settings import VaeHyper
from src.utils import ShapeError, complex_vec_to_real

def _small_hyper(**overrides):
    values = dict(epochs=3, batch_size=32, min_samples=100)
    values.update(overrides)
    return VaeHyper(**values)

def _errors(n=200, M=2, seed=0):
    rng = np.random.default_rng(seed)
    return 0.1 * (rng.standard_normal((n, M)) + 1j * rng.standard_normal((n, M)))

class ErrorSetTests(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_validation(self):
        with self.assertRaises(ValueError):
            va.ErrorSet(np.zeros((2, 2)), "synthetic")
        with self.assertRaises(ValueError):
            va.ErrorSet(np.array([[np.nan, 0.0]]), "vae")
        single = va.ErrorSet(np.ones(3), "estimation")
        self.assertEqual((single.size, single.dim, len(single)), (1, 3, 1))

    def test_save_and_load(self):
        errors = va.ErrorSet(_errors(5), "prediction", seed=12)
        path = va.save_error_set(os.path.join(self.tmp, "e2.bin"), errors)
        back = va.load_error_set(path)
        np.testing.assert_array_equal(back.vectors, errors.vectors)
        self.assertEqual(back.provenance, "prediction")
        self.assertEqual(back.seed, "12")

class KlTests(unittest.TestCase):
    def test_closed_form_values(self):
        self.assertAlmostEqual(va.kl_gaussian(np.zeros(3), np.ones(3)).item(), 0.0)
        self.assertAlmostEqual(va.kl_gaussian(1.0, 2.0).item(), 0.5 * (1.0 + 2.0 - np.log(2.0) - 1.0))

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(1)
        mu, var = np.array([0.5, -1.0]), np.array([0.4, 1.5])
        z = mu + np.sqrt(var) * rng.standard_normal((200000, 2))
        log_q = -0.5 * (np.log(2 * np.pi * var) + (z - mu) ** 2 / var)
        log_p = -0.5 * (np.log(2 * np.pi) + z ** 2)
        estimate = float(np.mean(np.sum(log_q - log_p, axis=1)))
        self.assertAlmostEqual(va.kl_gaussian(mu, var).item(), estimate, delta=0.02)

    def test_matches_monte_carlo_within_three_standard_errors(self):
        rng = np.random.default_rng(4)
        mu, var = np.array([1.0]), np.array([1.0])
        z = mu + np.sqrt(var) * rng.standard_normal((1000000, 1))
        log_ratio = np.sum(-0.5 * (np.log(var) + (z - mu) ** 2 / var) + 0.5 * z ** 2, axis=1)
        standard_error = float(np.std(log_ratio)) / np.sqrt(len(log_ratio))
        self.assertAlmostEqual(va.kl_gaussian(mu, var).item(), 0.5)
        self.assertLess(abs(float(np.mean(log_ratio)) - 0.5), 3.0 * standard_error)

    def test_discrete_decomposition_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            q = rng.dirichlet(np.ones(6))
            prior = rng.dirichlet(np.ones(6))
            likelihood = rng.uniform(0.01, 1.0, 6)
            direct, decomposed = va.discrete_kl_decomposition(q, prior, likelihood)
            self.assertAlmostEqual(direct, decomposed, delta=1e-10)
            self.assertGreaterEqual(direct, 0.0)

class ReparameterizationTests(unittest.TestCase):
    def test_sample_moments_and_gradient_path(self):
        rng = np.random.default_rng(3)
        mu = nn.parameter(np.full(50000, 2.0))
        var = nn.parameter(np.full(50000, 0.25))
        z = va.reparameterize(mu, var, rng)
        self.assertAlmostEqual(float(z.data.mean()), 2.0, delta=0.01)
        self.assertAlmostEqual(float(z.data.var()), 0.25, delta=0.01)
        nn.backward(nn.tsum(z))
        np.testing.assert_allclose(mu.grad, np.ones(50000))
        self.assertIsNotNone(var.grad)

class VaeLossTests(unittest.TestCase):
    def test_gradient_matches_finite_differences(self):
        model = va.build_vae(3, VaeHyper(hidden_factor=2), seed=5)
        batch = np.random.default_rng(6).standard_normal((5, 3))
        fn = lambda: va.vae_loss(batch, model, np.random.default_rng(0))
        nn.backward(fn())
        for name, tensor in model.parameters().items():
            self.assertLess(nn.relative_error(tensor.grad, nn.finite_difference_grad(fn, tensor)), 1e-4, name)

    def test_zero_encoders_give_the_prior(self):
        model = va.build_vae(3, VaeHyper(), seed=5)
        for net in (model.mean_encoder, model.var_encoder):
            for tensor in net.parameters().values():
                tensor.data[...] = 0.0
        mu, var = va.encode(np.ones(3), model)
        np.testing.assert_array_equal(mu, np.zeros(3))
        np.testing.assert_array_equal(var, np.ones(3))

    def test_loss_is_non_negative(self):
        model = va.build_vae(3, VaeHyper(), seed=1)
        batch = np.random.default_rng(2).standard_normal((8, 3))
        self.assertGreaterEqual(va.vae_loss(batch, model, np.random.default_rng(3)).item(), 0.0)

class VaeTrainingTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = va.train_vae(va.ErrorSet(_errors(), "prediction"), _small_hyper(), seed=3)
        cls.tmp = tempfile.mkdtemp()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def test_model_dimensions_and_curve(self):
        self.assertEqual((self.model.input_dim, self.model.latent_dim, self.model.hidden), (4, 4, 12))
        curve = self.model.meta["curve"]
        self.assertEqual(len(curve["train_loss"]), self.model.meta["epochs"])
        self.assertEqual(len(curve["reconstruction"]), self.model.meta["epochs"])

    def test_generation_uses_only_the_decoder(self):
        audited = va.VaeModel(MagicMock(), MagicMock(), self.model.decoder, self.model.input_dim,
                              self.model.latent_dim, self.model.hidden, self.model.center, self.model.scale)
        errors = va.generate_errors(audited, 7, np.random.default_rng(0), seed=5)
        audited.mean_encoder.assert_not_called()
        audited.var_encoder.assert_not_called()
        self.assertEqual(errors.vectors.shape, (7, 2))
        self.assertEqual(errors.provenance, "vae")

    def test_generation_is_reproducible(self):
        a = va.generate_errors(self.model, 10, np.random.default_rng(4))
        b = va.generate_errors(self.model, 10, np.random.default_rng(4))
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_checkpoint(self):
        path = va.save_vae(os.path.join(self.tmp, "vae.json"), self.model)
        back = va.load_vae(path)
        np.testing.assert_array_equal(va.generate_errors(back, 5, np.random.default_rng(1)).vectors,
                                      va.generate_errors(self.model, 5, np.random.default_rng(1)).vectors)
        mu, var = va.encode(complex_vec_to_real(_errors(1)[0]), back)
        self.assertEqual(mu.shape, (4,))
        self.assertTrue(np.all(var > 0))

    def test_too_few_samples(self):
        with self.assertRaises(ValueError):
            va.train_vae(_errors(50), _small_hyper())

    def test_batch_shape(self):
        with self.assertRaises(ShapeError):
            va.vae_terms(np.zeros(4), self.model, np.random.default_rng(0))

class VaeCovarianceTests(unittest.TestCase):
    def test_generated_covariance_matches_the_source(self):
        sigma = 0.01 * np.array([[1.0, 0.5], [0.5, 1.0]])
        observed = va.gaussian_error_set(sigma, 2000, np.random.default_rng(21))
        model = va.train_vae(observed, _small_hyper(epochs=150, batch_size=64, learning_rate=3e-3), seed=1)
        generated = va.generate_errors(model, 20000, np.random.default_rng(22))
        learned = va.sample_covariance(generated)
        self.assertLess(np.linalg.norm(learned - sigma) / np.linalg.norm(sigma), 0.2)

    def test_decoder_means_without_noise(self):
        model = va.build_vae(4, _small_hyper(), seed=0)
        model.center, model.scale = np.zeros(4), np.ones(4)
        rng = np.random.default_rng(3)
        z = np.random.default_rng(3).standard_normal((6, 4))
        means = va.generate_errors(model, 6, rng, decoder_noise=False).vectors
        np.testing.assert_allclose(complex_vec_to_real(means), model.decoder(z).data)

class CompositionTests(unittest.TestCase):
    def test_cross_product(self):
        e1 = np.array([[1.0, 0.0], [0.0, 1.0]])
        e2 = np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 0.0]])
        composed = va.compose_error_set(e1, e2, 2.0 * np.eye(2))
        self.assertEqual(composed.size, 6)
        self.assertEqual(composed.provenance, "composed")
        np.testing.assert_array_equal(composed.vectors[0], [3.0, 2.0])
        np.testing.assert_array_equal(composed.vectors[5], [0.0, 1.0])

    def test_xi_is_applied_to_e2_only(self):
        e1 = np.zeros((1, 2))
        e2 = np.array([[1.0, 2.0]])
        xi = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(va.compose_error_set(e1, e2, xi).vectors, [[2.0, 1.0]])

    def test_sampled_composition(self):
        e1, e2 = _errors(10, seed=1), _errors(10, seed=2)
        composed = va.compose_error_set(e1, e2, np.eye(2), size=25, rng=np.random.default_rng(0))
        self.assertEqual(composed.size, 25)
        with self.assertRaises(ValueError):
            va.compose_error_set(e1, e2, np.eye(2), size=25)

    def test_composition_errors(self):
        with self.assertRaises(ShapeError):
            va.compose_error_set(np.zeros((2, 2)), np.zeros((2, 3)), np.eye(3))
        with self.assertRaises(ShapeError):
            va.compose_error_set(np.zeros((2, 2)), np.zeros((2, 2)), np.eye(3))
        with self.assertRaises(ValueError):
            va.compose_error_set(np.zeros((0, 2)), np.zeros((2, 2)), np.eye(2))

class GaussianBaselineTests(unittest.TestCase):
    def test_sample_covariance_matches(self):
        cov = np.array([[2.0, 0.5j], [-0.5j, 1.0]])
        errors = va.gaussian_error_set(cov, 40000, np.random.default_rng(6))
        np.testing.assert_allclose(va.sample_covariance(errors), cov, atol=0.05)
        self.assertEqual(errors.provenance, "gaussian")

    def test_invalid_covariance(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ValueError):
            va.gaussian_error_set(np.array([[1.0, 0.0], [0.0, -1.0]]), 5, rng)
        with self.assertRaises(ValueError):
            va.gaussian_error_set(np.array([[1.0, 1.0], [0.0, 1.0]]), 5, rng)
        with self.assertRaises(ShapeError):
            va.gaussian_error_set(np.ones(3), 5, rng)

    def test_estimation_error_set(self):
        errors = va.estimation_error_set(0.5, 3, 20000, np.random.default_rng(7))
        self.assertEqual(errors.provenance, "estimation")
        np.testing.assert_allclose(np.diag(va.sample_covariance(errors)).real, 0.5, atol=0.03)

if __name__ == "__main__":
    unittest.main()
