import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from depass_lab.exceptions import InputError, NumericDomainError
from depass_lab.testing import fixture_tokens, seed42_model, small_model
from .forward import (
    AblationMask, forward, greedy_argmax, next_token_distribution, predict_next
)
from .functional import apply_rope, rmsnorm, rope_tables
from .trace import export_trace, load_trace


def naive_logits(tokens, weights):
    """Scalar-loop forward pass for plain-MLP, GELU, non-RoPE models."""
    config = weights.config
    D, H, dh = config.d_model, config.num_heads, config.head_dim
    eps = config.norm_eps

    def matvec(matrix, vector):
        return [sum(float(matrix[r][c]) * vector[c] for c in range(len(vector)))
                for r in range(len(matrix))]

    def norm(vector, gain):
        rms = math.sqrt(sum(v * v for v in vector) / len(vector) + eps)
        return [float(g) * v / rms for v, g in zip(vector, gain)]

    stream = [[float(v) for v in weights.embed[t]] for t in tokens]
    n = len(tokens)
    for layer in weights.layers:
        normed = [norm(row, layer.attn_norm) for row in stream]
        q = [matvec(layer.wq, row) for row in normed]
        k = [matvec(layer.wk, row) for row in normed]
        v = [matvec(layer.wv, row) for row in normed]
        concat = [[0.0] * (H * dh) for _ in range(n)]
        for h in range(H):
            kv = h // config.group_size
            for i in range(n):
                scores = []
                for j in range(i + 1):
                    dot = sum(q[i][h * dh + d] * k[j][kv * dh + d] for d in range(dh))
                    scores.append(dot / math.sqrt(dh))
                top = max(scores)
                exps = [math.exp(s - top) for s in scores]
                total = sum(exps)
                for j in range(i + 1):
                    for d in range(dh):
                        concat[i][h * dh + d] += exps[j] / total * v[j][kv * dh + d]
        stream = [[x + a for x, a in zip(stream[i], matvec(layer.wo, concat[i]))] for i in range(n)]
        normed = [norm(row, layer.mlp_norm) for row in stream]
        for i in range(n):
            pre = matvec(layer.w_up, normed[i])
            act = [0.5 * p * (1 + math.erf(p / math.sqrt(2))) for p in pre]
            out = matvec(layer.w_down, act)
            stream[i] = [x + o for x, o in zip(stream[i], out)]
    final = [norm(row, weights.final_norm) for row in stream]
    return np.array([matvec(weights.lm_head, row) for row in final])


class RmsNormTests(SimpleTestCase):

    def test_direct_arithmetic(self):
        out, scale = rmsnorm(np.array([3.0, 4.0]), np.ones(2), 0.0)
        np.testing.assert_allclose(out, [0.848528137, 1.131370850], rtol=1e-8)
        self.assertAlmostEqual(float(scale), 1 / math.sqrt(12.5))

    def test_unit_rms_is_identity(self):
        x = np.array([1.0, -1.0, 1.0, -1.0])
        out, _ = rmsnorm(x, np.ones(4), 0.0)
        np.testing.assert_array_equal(out, x)

    def test_matches_scalar_loop(self):
        x, gain, eps = [1.0, 2.0, 2.0], [2.0, 1.0, 0.5], 1e-6
        mean_square = 0.0
        for value in x:
            mean_square += value * value
        rms = math.sqrt(mean_square / 3 + eps)
        expected = [g * value / rms for value, g in zip(x, gain)]
        out, _ = rmsnorm(np.array(x), np.array(gain), eps)
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_zero_vector_without_eps(self):
        with self.assertRaises(NumericDomainError):
            rmsnorm(np.zeros(3), np.ones(3), 0.0)

    def test_zero_vector_with_eps(self):
        out, _ = rmsnorm(np.zeros(3), np.ones(3), 1e-6)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_row_stack_keeps_dtype(self):
        x = np.ones((2, 4), dtype=np.float32)
        out, scale = rmsnorm(x, np.ones(4, dtype=np.float32), 1e-6)
        self.assertEqual(out.dtype, np.float32)
        self.assertEqual(scale.shape, (2,))


class RopeTests(SimpleTestCase):

    def test_position_zero_unrotated(self):
        x = np.arange(8, dtype=np.float64).reshape(1, 1, 8)
        cos, sin = rope_tables(1, 8, 10000.0, np.float64)
        np.testing.assert_allclose(apply_rope(x, cos, sin), x)

    def test_rotation_preserves_norm(self):
        x = np.random.default_rng(0).normal(size=(5, 2, 8))
        cos, sin = rope_tables(5, 8, 10000.0, np.float64)
        np.testing.assert_allclose(
            np.linalg.norm(apply_rope(x, cos, sin), axis=-1), np.linalg.norm(x, axis=-1)
        )


class ForwardTests(SimpleTestCase):

    def test_matches_naive_loop(self):
        weights = seed42_model('f32')
        logits, _ = forward([0, 5, 9], weights)
        expected = naive_logits([0, 5, 9], weights)
        error = np.linalg.norm(logits - expected) / np.linalg.norm(expected)
        self.assertLessEqual(error, 1e-5)

    def test_single_token_attends_to_itself(self):
        _, trace = forward([0], seed42_model())
        for layer in trace.layers:
            np.testing.assert_array_equal(layer.attn_probs, np.ones((4, 1, 1)))

    def test_attention_rows_are_causal_distributions(self):
        _, trace = forward(fixture_tokens(), seed42_model())
        for layer in trace.layers:
            np.testing.assert_allclose(layer.attn_probs.sum(axis=-1), 1.0, atol=1e-6)
            self.assertTrue(np.all(layer.attn_probs >= 0))
            self.assertEqual(np.count_nonzero(np.triu(layer.attn_probs, k=1)), 0)

    def test_hidden_out_feeds_next_layer(self):
        _, trace = forward(fixture_tokens(), seed42_model())
        for before, after in zip(trace.layers, trace.layers[1:]):
            self.assertIs(before.hidden_out, after.hidden_in)
        self.assertIs(trace.hidden(0), trace.embeddings)
        self.assertIs(trace.hidden(4), trace.layers[3].hidden_out)

    def test_zero_down_projection_is_residual_identity(self):
        weights = small_model()
        for index, layer in enumerate(weights.layers):
            weights = weights.with_layer(index, w_down=np.zeros_like(layer.w_down))
        _, trace = forward([0, 3, 4, 5], weights)
        for layer in trace.layers:
            np.testing.assert_array_equal(layer.hidden_out, layer.hidden_attn)

    def test_causality(self):
        weights = seed42_model('f64')
        tokens = fixture_tokens(8)
        changed = list(tokens)
        changed[5] = (changed[5] % 96) + 1
        base, _ = forward(tokens, weights)
        other, _ = forward(changed, weights)
        np.testing.assert_array_equal(base[:5], other[:5])
        self.assertFalse(np.allclose(base[5:], other[5:]))

    def test_precisions_agree(self):
        tokens = fixture_tokens()
        low, _ = forward(tokens, seed42_model('f32'))
        high, _ = forward(tokens, seed42_model('f64'))
        self.assertEqual(low.dtype, np.float32)
        self.assertEqual(high.dtype, np.float64)
        np.testing.assert_allclose(low, high, rtol=1e-3, atol=1e-3 * np.abs(high).max())

    def test_gqa_rope_gated_model(self):
        weights = small_model(num_heads=4, num_kv_heads=2, mlp_kind='gated',
                              activation='silu', rope=True)
        logits, trace = forward([0, 1, 2, 3, 4], weights)
        self.assertEqual(logits.shape, (5, 97))
        for layer in trace.layers:
            self.assertEqual(layer.attn_probs.shape, (4, 5, 5))
            np.testing.assert_allclose(layer.attn_probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_sequence_too_long(self):
        with self.assertRaises(InputError):
            forward([0] * 65, seed42_model())

    def test_empty_sequence(self):
        with self.assertRaises(InputError):
            forward([], seed42_model())

    def test_token_out_of_range(self):
        with self.assertRaises(InputError):
            forward([0, 97], seed42_model())

    def test_masking_all_heads_matches_zero_output_projection(self):
        weights = small_model()
        heads = frozenset((layer, head) for layer in range(2) for head in range(2))
        masked, _ = forward([0, 3, 4, 5], weights, mask=AblationMask(heads=heads))
        for index, layer in enumerate(weights.layers):
            weights = weights.with_layer(index, wo=np.zeros_like(layer.wo))
        expected, _ = forward([0, 3, 4, 5], weights)
        np.testing.assert_array_equal(masked, expected)

    def test_empty_mask_is_bit_identical(self):
        weights = seed42_model()
        tokens = fixture_tokens()
        plain, _ = forward(tokens, weights)
        masked, _ = forward(tokens, weights, mask=AblationMask())
        np.testing.assert_array_equal(plain, masked)

    def test_trace_export_round_trip(self):
        _, trace = forward(fixture_tokens(6), seed42_model())
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'trace.archive'
            export_trace(trace, path)
            loaded = load_trace(path)
        self.assertEqual(loaded.tokens, trace.tokens)
        self.assertEqual(loaded.model_fingerprint, trace.model_fingerprint)
        for (name, a), (_, b) in zip(trace.tensors(), loaded.tensors()):
            np.testing.assert_array_equal(a, b, err_msg=name)


class NextTokenTests(SimpleTestCase):

    def test_symmetric_logits(self):
        dist = next_token_distribution([0.0, 0.0])
        np.testing.assert_allclose(dist.probabilities, [0.5, 0.5])

    def test_ln2_logits(self):
        dist = next_token_distribution([math.log(2), 0.0])
        np.testing.assert_allclose(dist.probabilities, [2 / 3, 1 / 3])

    def test_non_finite_rejected(self):
        with self.assertRaises(NumericDomainError):
            next_token_distribution([0.0, np.inf])
        with self.assertRaises(NumericDomainError):
            next_token_distribution([np.nan, 0.0])
        with self.assertRaises(NumericDomainError):
            greedy_argmax([np.nan, 0.0])
        with self.assertRaises(NumericDomainError):
            greedy_argmax(np.array([1.0, -np.inf, 0.5]))

    def test_ties_go_to_lowest_id(self):
        logits = np.zeros(10)
        logits[3] = logits[7] = 5.0
        self.assertEqual(greedy_argmax(logits), 3)

    def test_distribution_sums_to_one(self):
        token, dist = predict_next(fixture_tokens(), seed42_model())
        self.assertAlmostEqual(float(dist.probabilities.sum()), 1.0, delta=1e-6)
        self.assertEqual(token, int(np.argmax(dist.probabilities)))
