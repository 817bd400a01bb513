import math
import os
import sys
import unittest

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import InvalidArgumentError, NumericalError, ShapeError
from app.services.kernels import (
    Tensor, add, bias_add, concat, conv2d, grad_check, max_pool2x, no_grad, parameter, relu, softmax_cross_entropy,
    upsample2x,
)
from app.services.oracles import gradcheck_all


class TestForward(unittest.TestCase):
    def test_identity_conv(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w)).data, x)

    def test_conv_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(1, 2, 3, 3))
        out = conv2d(Tensor(x), Tensor(w)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                expected[i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[0])
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)

    def test_conv_stride2_shape(self):
        out = conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))), stride=2)
        self.assertEqual(out.shape, (1, 4, 4, 4))

    def test_conv_errors(self):
        with self.assertRaises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))
        with self.assertRaises(InvalidArgumentError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))), stride=3)

    def test_relu_all_negative(self):
        x = parameter(-np.ones((1, 2, 3, 3)))
        out = relu(x)
        self.assertFalse(out.data.any())
        out.backward(np.ones(out.shape))
        self.assertFalse(x.grad.any())

    def test_max_pool(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool2x(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
        with self.assertRaises(ShapeError):
            max_pool2x(Tensor(np.zeros((1, 1, 5, 4))))

    def test_upsample(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = upsample2x(Tensor(x)).data[0, 0]
        np.testing.assert_array_equal(out[:2, :2], 1.0)
        np.testing.assert_array_equal(out[2:, 2:], 4.0)

    def test_shape_error_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 4))))
        self.assertIn("(1, 2, 3, 3)", str(ctx.exception))
        self.assertIn("(1, 2, 4, 4)", str(ctx.exception))
        with self.assertRaises(ShapeError):
            concat([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3)))])
        with self.assertRaises(ShapeError):
            bias_add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(3)))

    def test_uniform_logits_cross_entropy(self):
        logits = Tensor(np.zeros((2, 2, 3, 3)))
        target = np.zeros((2, 3, 3), dtype=np.int64)
        self.assertAlmostEqual(float(softmax_cross_entropy(logits, target).data), math.log(2.0))

    def test_cross_entropy_bad_labels(self):
        with self.assertRaises(InvalidArgumentError):
            softmax_cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))


class TestBackward(unittest.TestCase):
    def test_shared_node_accumulates(self):
        x = parameter(np.ones((1, 1, 2, 2)))
        out = add(x, x)
        out.backward(np.ones(out.shape))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_scalar_backward(self):
        logits = parameter(np.zeros((1, 2, 2, 2)))
        loss = softmax_cross_entropy(logits, np.ones((1, 2, 2), dtype=np.int64))
        loss.backward()
        # d/dz of -log softmax at uniform logits: p - onehot, averaged over 4 pixels
        np.testing.assert_allclose(logits.grad[0, 0], 0.5 / 4)
        np.testing.assert_allclose(logits.grad[0, 1], -0.5 / 4)

    def test_backward_needs_scalar(self):
        x = parameter(np.ones((1, 1, 2, 2)))
        with self.assertRaises(InvalidArgumentError):
            relu(x).backward()

    def test_no_grad(self):
        x = parameter(np.ones((1, 1, 2, 2)))
        with no_grad():
            out = relu(x)
        self.assertFalse(out.requires_grad)
        self.assertEqual(out._prev, ())


class TestGradCheck(unittest.TestCase):
    def test_linear_op_is_exact(self):
        report = grad_check(lambda x, w: conv2d(x, w), [(2, 3, 4, 4), (5, 3, 1, 1)], tolerance=1e-8,
                            rng=np.random.default_rng(0), name="conv1x1")
        # bilinear in (x, w) but linear along each single-input direction
        self.assertTrue(report.passed, report.per_input)

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
        report = grad_check(relu, [x], tolerance=1e-6, rng=rng, name="relu")
        self.assertTrue(report.passed, report.per_input)

    def test_every_op_passes(self):
        reports = gradcheck_all()
        self.assertGreaterEqual(len(reports), 12)
        for report in reports:
            self.assertLess(report.max_rel_error, 1e-4, report.name)

    def test_non_finite_input(self):
        x = np.ones((1, 1, 2, 2))
        x[0, 0, 0, 0] = np.nan
        with self.assertRaises(NumericalError):
            grad_check(relu, [x])

    def test_detects_wrong_gradient(self):
        def broken(x):
            out = relu(x)
            out._backward = lambda: x._accumulate(2.0 * out.grad)
            return out

        x = np.abs(np.random.default_rng(2).normal(size=(1, 1, 3, 3))) + 0.5
        self.assertFalse(grad_check(broken, [x], name="broken").passed)


if __name__ == "__main__":
    unittest.main()
