import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..', 'src')))

import unittest

import numpy as np

from src import nn_core as nn
from src.utils import ShapeError, TrainingDivergedError

class NnCoreTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_product_gradient(self):
        a = nn.parameter([1.0, 2.0, 3.0])
        b = nn.parameter([4.0, 5.0, 6.0])
        nn.backward(nn.tsum(a * b))
        np.testing.assert_allclose(a.grad, [4.0, 5.0, 6.0])
        np.testing.assert_allclose(b.grad, [1.0, 2.0, 3.0])

    def test_broadcast_gradient_is_summed(self):
        a = nn.parameter(np.ones((2, 3)))
        b = nn.parameter(np.zeros(3))
        nn.backward(nn.tsum(a + b))
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(a.grad, np.ones((2, 3)))

    def test_ndarray_on_the_left_stays_on_the_trace(self):
        a = nn.parameter([1.0, -2.0])
        out = np.array([3.0, 4.0]) * a
        self.assertIsInstance(out, nn.Tensor)
        nn.backward(nn.tsum(out))
        np.testing.assert_allclose(a.grad, [3.0, 4.0])

    def test_matmul_matches_finite_differences(self):
        A = nn.parameter(self.rng.standard_normal((3, 4)))
        B = nn.parameter(self.rng.standard_normal((4, 2)))
        C = self.rng.standard_normal((3, 2))
        fn = lambda: nn.tsum(nn.tanh(nn.matmul(A, B)) * C)
        nn.backward(fn())
        self.assertLess(nn.relative_error(A.grad, nn.finite_difference_grad(fn, A)), 1e-6)
        self.assertLess(nn.relative_error(B.grad, nn.finite_difference_grad(fn, B)), 1e-6)

    def test_conv2d_matches_finite_differences(self):
        x = nn.parameter(self.rng.standard_normal((2, 1, 5, 3)))
        w = nn.parameter(self.rng.standard_normal((2, 1, 3, 2)))
        b = nn.parameter(self.rng.standard_normal(2))
        fn = lambda: nn.tsum(nn.conv2d(x, w, b, padding=(1, 0)) ** 2)
        nn.backward(fn())
        for tensor in (x, w, b):
            self.assertLess(nn.relative_error(tensor.grad, nn.finite_difference_grad(fn, tensor)), 1e-5)

    def test_conv2d_output_shape(self):
        x = nn.Tensor(np.zeros((1, 1, 16, 4)))
        w = nn.Tensor(np.zeros((8, 1, 5, 3)))
        self.assertEqual(nn.conv2d(x, w).shape, (1, 8, 12, 2))
        self.assertEqual(nn.conv2d(x, w, padding=(2, 1)).shape, (1, 8, 16, 4))

    def test_maxpool_routes_gradient_to_the_maximum(self):
        x = nn.parameter(np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 1, 4, 1))
        out = nn.maxpool2d(x, (2, 1))
        np.testing.assert_allclose(out.data.reshape(-1), [3.0, 2.0])
        nn.backward(nn.tsum(out))
        np.testing.assert_allclose(x.grad.reshape(-1), [0.0, 1.0, 1.0, 0.0])

    def test_take_along_axis_gradient(self):
        a = nn.parameter(np.arange(6.0).reshape(2, 3))
        picked = nn.take_along_axis(a, np.array([[2], [0]]), axis=1)
        np.testing.assert_allclose(picked.data.reshape(-1), [2.0, 3.0])
        nn.backward(nn.tsum(picked))
        np.testing.assert_allclose(a.grad, [[0, 0, 1], [1, 0, 0]])

    def test_relu_hinge(self):
        a = nn.parameter([-1.0, 2.0])
        out = nn.relu(a)
        np.testing.assert_allclose(out.data, [0.0, 2.0])
        nn.backward(nn.tsum(out))
        np.testing.assert_allclose(a.grad, [0.0, 1.0])

    def test_sigmoid_and_tanh_values(self):
        x = nn.Tensor([0.0, 100.0, -100.0])
        np.testing.assert_allclose(nn.sigmoid(x).data, [0.5, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(nn.tanh(nn.Tensor([0.0])).data, [0.0])

    def test_backward_needs_scalar_root(self):
        a = nn.parameter([1.0, 2.0])
        with self.assertRaises(ShapeError):
            nn.backward(a * 2.0)

    def test_non_finite_loss_aborts(self):
        a = nn.parameter([0.0])
        with np.errstate(divide="ignore"):
            loss = nn.tsum(nn.log(a))
        with self.assertRaises(TrainingDivergedError):
            nn.backward(loss)

    def test_matmul_rejects_vectors(self):
        with self.assertRaises(ShapeError):
            nn.matmul(nn.Tensor([1.0, 2.0]), nn.Tensor(np.ones((2, 2))))

    def test_reused_node_accumulates(self):
        a = nn.parameter([3.0])
        nn.backward(nn.tsum(a * a + a))
        np.testing.assert_allclose(a.grad, [7.0])

if __name__ == "__main__":
    unittest.main()
