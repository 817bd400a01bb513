import os
import sys
import unittest

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import InvalidArgumentError, ShapeError
from app.services.attention import (
    SelfAttentionParams, effective_window, gca_reference, gca_weights, global_cross_attention, lca_weights,
    linear_attention, linear_attention_reference, linear_self_attention, local_cross_attention,
    positional_encoding_2d,
)
from app.services.kernels import Tensor, grad_check
from app.services.oracles import softmax_attention_reference


class TestGlobalCrossAttention(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.f1, self.f2 = rng.normal(size=(2, 8, 5, 4))

    def test_matches_double_loop(self):
        out = global_cross_attention(Tensor(self.f1), Tensor(self.f2)).data
        self.assertEqual(out.shape, (16, 5, 4))
        np.testing.assert_allclose(out, gca_reference(self.f1, self.f2), atol=1e-6)

    def test_first_half_is_f1(self):
        out = global_cross_attention(Tensor(self.f1), Tensor(self.f2)).data
        np.testing.assert_array_equal(out[:8], self.f1)

    def test_batch_equals_per_sample(self):
        rng = np.random.default_rng(1)
        f1, f2 = rng.normal(size=(2, 3, 8, 4, 4))
        batched = global_cross_attention(Tensor(f1), Tensor(f2)).data
        for i in range(3):
            single = global_cross_attention(Tensor(f1[i]), Tensor(f2[i])).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_weights_are_distributions(self):
        weights = gca_weights(self.f1[None], self.f2[None])
        self.assertEqual(weights.shape, (1, 20, 20))
        self.assertGreaterEqual(weights.min(), 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_key_permutation_invariance(self):
        perm = np.random.default_rng(2).permutation(20)
        f2p = self.f2.reshape(8, 20)[:, perm].reshape(8, 5, 4)
        np.testing.assert_allclose(global_cross_attention(Tensor(self.f1), Tensor(self.f2)).data,
                                   global_cross_attention(Tensor(self.f1), Tensor(f2p)).data, atol=1e-10)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            global_cross_attention(Tensor(self.f1), Tensor(self.f2[:, :4]))


class TestLocalCrossAttention(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.f1, self.f2 = rng.normal(size=(2, 8, 6, 5))

    def test_full_window_equals_global(self):
        local = local_cross_attention(Tensor(self.f1), Tensor(self.f2), 11).data
        glob = global_cross_attention(Tensor(self.f1), Tensor(self.f2)).data
        np.testing.assert_allclose(local, glob, atol=1e-6)

    def test_oversized_window_clamps(self):
        self.assertEqual(effective_window(99, 6, 5), 11)
        self.assertEqual(effective_window(3, 6, 5), 3)
        np.testing.assert_allclose(local_cross_attention(Tensor(self.f1), Tensor(self.f2), 99).data,
                                   local_cross_attention(Tensor(self.f1), Tensor(self.f2), 11).data)

    def test_window_one_copies_f2(self):
        out = local_cross_attention(Tensor(self.f1), Tensor(self.f2), 1).data
        np.testing.assert_allclose(out[8:], self.f2, atol=1e-12)

    def test_invalid_windows(self):
        for window in (0, 2, -3):
            with self.assertRaises(InvalidArgumentError):
                local_cross_attention(Tensor(self.f1), Tensor(self.f2), window)

    def test_border_weights(self):
        weights = lca_weights(self.f1[None], self.f2[None], 3)
        self.assertEqual(weights.shape, (1, 6, 5, 3, 3))
        np.testing.assert_allclose(weights.sum(axis=(-2, -1)), 1.0, atol=1e-12)
        # top-left query: the row above and the column to the left are outside the map
        self.assertTrue(np.all(weights[0, 0, 0, 0, :] == 0.0))
        self.assertTrue(np.all(weights[0, 0, 0, :, 0] == 0.0))
        self.assertGreater(weights[0, 3, 2].min(), 0.0)

    def test_gradients(self):
        report = grad_check(lambda a, b: local_cross_attention(a, b, 3), [(1, 4, 5, 5), (1, 4, 5, 5)],
                            rng=np.random.default_rng(4), name="lca")
        self.assertTrue(report.passed, report.per_input)


class TestLinearAttention(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.q, self.k, self.v = rng.normal(size=(3, 16, 6, 5))

    def run_linear(self, heads):
        return linear_attention(Tensor(self.q[None]), Tensor(self.k[None]), Tensor(self.v[None]), heads).data[0]

    def test_matches_explicit_kernel_matrix(self):
        for heads in (1, 4):
            np.testing.assert_allclose(self.run_linear(heads),
                                       linear_attention_reference(self.q, self.k, self.v, heads), atol=1e-6)

    def test_is_not_softmax_attention(self):
        diff = np.abs(self.run_linear(1) - softmax_attention_reference(self.q, self.k, self.v))
        self.assertGreater(diff.max(), 1e-3)

    def test_heads_must_divide_channels(self):
        with self.assertRaises(InvalidArgumentError):
            self.run_linear(3)

    def test_needs_batched_input(self):
        with self.assertRaises(ShapeError):
            linear_attention(Tensor(self.q), Tensor(self.k), Tensor(self.v), 4)

    def test_gradients(self):
        report = grad_check(lambda q, k, v: linear_attention(q, k, v, 2), [(1, 4, 3, 3)] * 3,
                            rng=np.random.default_rng(6), name="linear_attention")
        self.assertTrue(report.passed, report.per_input)


class TestSelfAttention(unittest.TestCase):
    def test_positional_encoding(self):
        pe = positional_encoding_2d(8, 4, 6)
        self.assertEqual(pe.shape, (8, 4, 6))
        # band 0 is sin(x) at frequency 1, constant along y
        np.testing.assert_allclose(pe[0, 2], np.sin(np.arange(6)))
        np.testing.assert_allclose(pe[0, 0], pe[0, 3])
        with self.assertRaises(InvalidArgumentError):
            positional_encoding_2d(6, 4, 4)

    def test_zero_output_projection_is_identity(self):
        rng = np.random.default_rng(7)
        params = SelfAttentionParams.create(8, rng, dtype=np.float64)
        params.wo.data[:] = 0.0
        x = rng.normal(size=(2, 8, 4, 4))
        np.testing.assert_array_equal(linear_self_attention(Tensor(x), params, heads=2).data, x)

    def test_residual_shape(self):
        rng = np.random.default_rng(8)
        params = SelfAttentionParams.create(8, rng, dtype=np.float64)
        out = linear_self_attention(Tensor(rng.normal(size=(8, 4, 4))), params, heads=4)
        self.assertEqual(out.shape, (8, 4, 4))
        self.assertEqual(len(params.named("msa")), 8)


if __name__ == "__main__":
    unittest.main()
