import math
import tempfile
from itertools import combinations
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from depass_lab.exceptions import ConsistencyError, InputError, ResourceBudgetError
from depass_lab.testing import fixture_tokens, seed42_model, small_model
from model_io.archive import read_archive
from transformer.forward import forward
from transformer.functional import rmsnorm
from .init import InitSpec, contiguous_bins, groups_from_word_spans, init_decomposition
from .propagation import (
    APPORTION_RULES, apportion, apportion_mlp, propagate_attention, propagate_mlp,
    propagate_rmsnorm
)
from .runner import run_decomposed
from .state import Stage, check_reconstruction, export_state, reconstruct, reconstruction_error
from .serializers import parse_groups_file


def rank3_projector(d=64, seed=3):
    basis, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, 3)))
    return basis @ basis.T


def traced(precision='f64', length=16):
    weights = seed42_model(precision)
    _, trace = forward(fixture_tokens(length), weights)
    return weights, trace


def all_init_specs(precision):
    projector = rank3_projector().astype(np.float32 if precision == 'f32' else np.float64)
    return [
        InitSpec.token_wise(),
        InitSpec.attention_heads(2),
        InitSpec.mlp_neurons(2, contiguous_bins(128, 16)),
        InitSpec.subspace(2, projector),
    ]


class InitDecompositionTests(SimpleTestCase):

    def test_single_group_owns_embeddings(self):
        weights, trace = traced()
        state = init_decomposition(trace, weights, InitSpec.token_wise([range(16)]))
        self.assertEqual(state.data.shape, (16, 1, 64))
        np.testing.assert_array_equal(state.data[:, 0, :], trace.embeddings)

    def test_token_wise_places_each_embedding(self):
        weights, trace = traced(length=4)
        state = init_decomposition(trace, weights, InitSpec.token_wise())
        for i in range(4):
            np.testing.assert_array_equal(state.data[i, i], trace.embeddings[i])
            self.assertEqual(np.count_nonzero(np.delete(state.data[i], i, axis=0)), 0)

    def test_identity_projector_leaves_empty_complement(self):
        weights, trace = traced()
        state = init_decomposition(trace, weights, InitSpec.subspace(2, np.eye(64)))
        np.testing.assert_array_equal(state.data[:, 1, :], 0)
        self.assertEqual(state.labels, ('parallel', 'orthogonal'))

    def test_heads_rebuild_post_attention_state(self):
        weights, trace = traced('f32')
        state = init_decomposition(trace, weights, InitSpec.attention_heads(2))
        self.assertEqual(state.num_components, 5)
        self.assertEqual(state.point.stage, Stage.POST_ATTENTION)
        self.assertLessEqual(check_reconstruction(state, trace), 1e-5)

    def test_neuron_bins_rebuild_post_mlp_state(self):
        weights, trace = traced()
        state = init_decomposition(trace, weights, InitSpec.mlp_neurons(2))
        self.assertEqual(state.num_components, 128 // 16 + 1)
        self.assertEqual(state.labels[0], 'L2.N0-15')
        self.assertLessEqual(check_reconstruction(state, trace), 1e-12)

    def test_empty_group_rejected(self):
        weights, trace = traced(length=3)
        with self.assertRaises(InputError):
            init_decomposition(trace, weights, InitSpec.token_wise([[0, 1, 2], []]))

    def test_overlapping_groups_rejected(self):
        weights, trace = traced(length=3)
        with self.assertRaises(InputError):
            init_decomposition(trace, weights, InitSpec.token_wise([[0, 1], [1, 2]]))

    def test_layer_out_of_range(self):
        weights, trace = traced()
        with self.assertRaises(InputError):
            init_decomposition(trace, weights, InitSpec.attention_heads(4))
        with self.assertRaises(InputError):
            init_decomposition(trace, weights, InitSpec.subspace(5, np.eye(64)))

    def test_word_spans_group_tokens(self):
        self.assertEqual(groups_from_word_spans([(1, 3), (3, 4)], 5), ((0,), (1, 2), (3,), (4,)))

    def test_overlapping_word_spans_rejected(self):
        with self.assertRaises(InputError):
            groups_from_word_spans([(1, 3), (2, 4)], 5)

    def test_groups_file_forms(self):
        self.assertEqual(parse_groups_file([[0], [1, 2]])['groups'], [[0], [1, 2]])
        self.assertEqual(parse_groups_file({'word_spans': [[1, 3]]})['word_spans'], [(1, 3)])
        with self.assertRaises(InputError):
            parse_groups_file({'groups': [[0]], 'word_spans': [[1, 3]]})


class RmsNormPropagationTests(SimpleTestCase):

    def test_single_component_is_rmsnorm(self):
        x = np.random.default_rng(1).normal(size=(3, 8))
        out = propagate_rmsnorm(x[:, None, :], x, np.ones(8), 1e-6)
        expected, _ = rmsnorm(x, np.ones(8), 1e-6)
        np.testing.assert_allclose(out[:, 0, :], expected, rtol=1e-14)

    def test_shared_scale(self):
        components = np.array([[[1.0, 0.0], [2.0, 4.0]]])
        out = propagate_rmsnorm(components, components.sum(axis=1), np.ones(2), 0.0)
        scale = 1 / math.sqrt(12.5)
        np.testing.assert_allclose(out[0], [[scale, 0.0], [2 * scale, 4 * scale]])
        np.testing.assert_allclose(out[0], [[0.28284, 0.0], [0.56569, 1.13137]], atol=1e-5)

    def test_split_sums_to_rmsnorm(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 16))
        parts = rng.normal(size=(4, 2, 16))
        components = np.concatenate([parts, (x - parts.sum(axis=1))[:, None, :]], axis=1)
        gain = rng.uniform(0.5, 1.5, size=16)
        out = propagate_rmsnorm(components, x, gain, 1e-6)
        expected, _ = rmsnorm(x, gain, 1e-6)
        np.testing.assert_allclose(out.sum(axis=1), expected, atol=1e-12)


class AttentionPropagationTests(SimpleTestCase):

    def setUp(self):
        self.weights = small_model()
        self.config = self.weights.config
        rng = np.random.default_rng(4)
        self.components = rng.normal(size=(3, 2, 16))
        self.normed = rng.normal(size=(3, 2, 16))

    def test_identity_attention(self):
        probs = np.stack([np.eye(3)] * self.config.num_heads)
        out = propagate_attention(self.components, self.normed, probs, self.weights.layers[0], self.config)
        vo = sum(self.weights.head_vo(0, h) for h in range(self.config.num_heads))
        np.testing.assert_allclose(out, self.components + self.normed @ vo, atol=1e-12)

    def test_zero_output_projection(self):
        weights = self.weights.with_layer(0, wo=np.zeros((16, 16)))
        probs = np.full((2, 3, 3), 1 / 3)
        out = propagate_attention(self.components, self.normed, probs, weights.layers[0], self.config)
        np.testing.assert_array_equal(out, self.components)

    def test_token_wise_layer_zero_matches_trace(self):
        weights = seed42_model('f32')
        _, trace = forward([0, 5, 9], weights)
        state = init_decomposition(trace, weights, InitSpec.token_wise())
        layer = trace.layers[0]
        normed = propagate_rmsnorm(state.data, layer.hidden_in, weights.layers[0].attn_norm, 1e-6)
        out = propagate_attention(state.data, normed, layer.attn_probs, weights.layers[0], weights.config)
        self.assertLessEqual(reconstruction_error(out.sum(axis=1), layer.hidden_attn), 1e-5)

    def test_norm_and_attention_are_linear(self):
        weights, trace = traced(length=6)
        layer, layer_weights = trace.layers[1], weights.layers[1]
        rng = np.random.default_rng(5)
        u = rng.normal(size=(6, 1, 64))
        v = rng.normal(size=(6, 1, 64))

        def stage(x):
            normed = propagate_rmsnorm(x, layer.hidden_in, layer_weights.attn_norm, 1e-6,
                                       scale=layer.rms_scale_attn)
            return propagate_attention(x, normed, layer.attn_probs, layer_weights, weights.config)

        np.testing.assert_allclose(stage(u + v), stage(u) + stage(v), atol=1e-10)

    def test_zero_subspace_stays_zero_before_mlp(self):
        weights, trace = traced()
        state = init_decomposition(trace, weights, InitSpec.subspace(2, np.zeros((64, 64))))
        layer, layer_weights = trace.layers[2], weights.layers[2]
        normed = propagate_rmsnorm(state.data, layer.hidden_in, layer_weights.attn_norm, 1e-6)
        out = propagate_attention(state.data, normed, layer.attn_probs, layer_weights, weights.config)
        np.testing.assert_array_equal(out[:, 0, :], 0)


class ApportionTests(SimpleTestCase):

    @staticmethod
    def shares(values, rule):
        return apportion(np.array(values, dtype=float).reshape(1, -1, 1), rule)[0, :, 0]

    def test_softmax_examples(self):
        np.testing.assert_allclose(self.shares([0, 0], 'softmax'), [0.5, 0.5])
        np.testing.assert_allclose(self.shares([math.log(2), 0], 'softmax'), [2 / 3, 1 / 3])

    def test_linear_examples(self):
        np.testing.assert_allclose(self.shares([1, 3], 'linear_weighted'), [0.25, 0.75])
        np.testing.assert_allclose(self.shares([1, 3], 'linear_norm'), [0.0, 1.0])

    def test_command_line_spelling(self):
        np.testing.assert_allclose(self.shares([1, 3], 'linear-norm'), [0.0, 1.0])

    def test_unknown_rule(self):
        with self.assertRaises(InputError):
            self.shares([1, 3], 'max')

    def test_linear_norm_all_equal_falls_back_to_uniform(self):
        with self.assertLogs('depass.propagation', level='WARNING') as logs:
            shares = self.shares([2, 2, 2, 2], 'linear_norm')
        np.testing.assert_array_equal(shares, [0.25] * 4)
        self.assertIn('linear_norm', logs.output[0])

    def test_linear_weighted_zero_sum_falls_back_to_uniform(self):
        with self.assertLogs('depass.propagation', level='WARNING'):
            shares = self.shares([1.0, -1.0], 'linear_weighted')
        np.testing.assert_array_equal(shares, [0.5, 0.5])

    def test_shares_sum_to_one_on_fixture(self):
        weights, trace = traced()
        state = init_decomposition(trace, weights, InitSpec.token_wise())
        layer = trace.layers[0]
        normed = propagate_rmsnorm(state.data, layer.hidden_in, weights.layers[0].mlp_norm, 1e-6)
        for rule in APPORTION_RULES:
            alpha = apportion_mlp(normed, weights.subkeys(0), rule)
            np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6, err_msg=rule)


class MlpPropagationTests(SimpleTestCase):

    def test_single_component_is_standard_mlp(self):
        weights, trace = traced()
        layer = trace.layers[1]
        alpha = np.ones((16, 1, 128))
        out = propagate_mlp(layer.hidden_attn[:, None, :], alpha, layer.mlp_activations,
                            weights.subvalues(1))
        np.testing.assert_allclose(out[:, 0, :], layer.hidden_out, atol=1e-12)

    def test_zero_activations_pass_through(self):
        components = np.random.default_rng(6).normal(size=(2, 3, 4))
        alpha = np.full((2, 3, 5), 1 / 3)
        out = propagate_mlp(components, alpha, np.zeros((2, 5)), np.ones((5, 4)))
        np.testing.assert_array_equal(out, components)


class RunDecomposedTests(SimpleTestCase):

    def test_reconstruction_suite_f64(self):
        weights, trace = traced('f64')
        for spec in all_init_specs('f64'):
            for rule in APPORTION_RULES:
                run = run_decomposed(trace, weights, spec, rule)
                self.assertTrue(run.errors)
                self.assertLessEqual(run.max_error, 1e-10, f'{spec.kind} {rule}')

    def test_reconstruction_suite_f32(self):
        weights, trace = traced('f32')
        for spec in all_init_specs('f32'):
            for rule in APPORTION_RULES:
                run = run_decomposed(trace, weights, spec, rule)
                self.assertLessEqual(run.max_error, 1e-4, f'{spec.kind} {rule}')
                self.assertEqual(run.final_normed.dtype, np.float32)

    def test_single_component_tracks_final_state(self):
        weights, trace = traced()
        run = run_decomposed(trace, weights, InitSpec.token_wise([range(16)]))
        np.testing.assert_allclose(run.final.data[:, 0, :], trace.hidden(4), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(run.final_normed.data[:, 0, :], trace.final_normed, atol=1e-10)

    def test_batching_invariance(self):
        weights, trace = traced()
        one = run_decomposed(trace, weights, InitSpec.token_wise(), component_batch=1)
        full = run_decomposed(trace, weights, InitSpec.token_wise(), component_batch=16)
        np.testing.assert_allclose(one.final_normed.data, full.final_normed.data, atol=1e-10)

    def test_permutation_equivariance(self):
        weights, trace = traced(length=6)
        groups = [(0,), (1, 2), (3,), (4, 5)]
        forward_run = run_decomposed(trace, weights, InitSpec.token_wise(groups))
        reverse_run = run_decomposed(trace, weights, InitSpec.token_wise(groups[::-1]))
        np.testing.assert_allclose(reverse_run.final_normed.data,
                                   forward_run.final_normed.data[:, ::-1, :], atol=1e-12)
        self.assertEqual(reverse_run.labels, forward_run.labels[::-1])

    def test_merge_additivity_linear_weighted(self):
        weights, trace = traced(length=8)
        split = run_decomposed(trace, weights, InitSpec.token_wise(), 'linear_weighted')
        merged_groups = [(0,), (1, 2)] + [(i,) for i in range(3, 8)]
        merged = run_decomposed(trace, weights, InitSpec.token_wise(merged_groups), 'linear_weighted')
        parts = split.final_normed.data
        np.testing.assert_allclose(merged.final_normed.data[:, 1], parts[:, 1] + parts[:, 2], atol=1e-6)
        np.testing.assert_allclose(merged.final_normed.data[:, 2:], parts[:, 3:], atol=1e-6)

    def test_softmax_is_not_merge_additive(self):
        weights, trace = traced(length=8)
        split = run_decomposed(trace, weights, InitSpec.token_wise(), 'softmax').final_normed.data
        worst = 0.0
        for i, j in combinations(range(8), 2):
            groups = [(i, j)] + [(p,) for p in range(8) if p not in (i, j)]
            merged = run_decomposed(trace, weights, InitSpec.token_wise(groups), 'softmax')
            diff = (merged.final_normed.data[-1, 0] - split[-1, i] - split[-1, j]) @ weights.lm_head.T
            worst = max(worst, float(np.abs(diff).max()))
            if worst > 1e-3:
                break
        self.assertGreater(worst, 1e-3)

    def test_zero_mlp_matches_linear_map(self):
        weights = seed42_model('f64')
        for index, layer in enumerate(weights.layers):
            weights = weights.with_layer(index, w_down=np.zeros_like(layer.w_down))
        tokens = fixture_tokens(6)
        _, trace = forward(tokens, weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise())
        for t in range(6):
            c = np.zeros((6, 64))
            c[t] = trace.embeddings[t]
            for index, layer in enumerate(trace.layers):
                normed = c * layer.rms_scale_attn[:, None] * weights.layers[index].attn_norm
                c = c + sum(layer.attn_probs[h] @ normed @ weights.head_vo(index, h) for h in range(4))
            c = c * trace.final_scale[:, None] * weights.final_norm
            np.testing.assert_allclose(run.final_normed.data[:, t, :], c, atol=1e-8)

    def test_gated_model_reconstructs(self):
        weights = small_model(mlp_kind='gated', activation='silu', rope=True, num_kv_heads=1)
        _, trace = forward([0, 4, 8, 15, 16], weights)
        for mode in ('gate', 'up', 'gate_plus_up'):
            run = run_decomposed(trace, weights, InitSpec.token_wise(), gated_subkey=mode)
            self.assertLessEqual(run.max_error, 1e-10, mode)

    def test_snapshots_by_residual_index(self):
        weights, trace = traced()
        run = run_decomposed(trace, weights, InitSpec.attention_heads(1), snapshot_layers={0, 1, 2, 4})
        self.assertEqual(sorted(run.snapshots), [2, 4])
        self.assertLessEqual(check_reconstruction(run.snapshots[2], trace), 1e-10)

    def test_drift_raises_consistency_error(self):
        weights, trace = traced()
        other = weights.with_layer(0, wo=np.zeros((64, 64)))
        with self.assertRaises(ConsistencyError):
            run_decomposed(trace, other, InitSpec.token_wise())

    def test_state_budget(self):
        weights, trace = traced()
        with self.assertRaises(ResourceBudgetError):
            run_decomposed(trace, weights, InitSpec.token_wise(), max_state_elements=1000)

    def test_state_budget_counts_mlp_work_arrays(self):
        weights, trace = traced()
        # 2 * 16 * 16 * 64 for state and stage output, 2 * 16 * 16 * 128 for preactivations and shares.
        needed = 32768 + 65536
        with self.assertRaises(ResourceBudgetError):
            run_decomposed(trace, weights, InitSpec.token_wise(), max_state_elements=needed - 1)
        run = run_decomposed(trace, weights, InitSpec.token_wise(), max_state_elements=needed)
        self.assertEqual(run.final.num_components, 16)

    def test_state_budget_checked_before_init(self):
        weights, trace = traced()
        with mock.patch('depass.runner.init_decomposition') as init:
            with self.assertRaises(ResourceBudgetError):
                run_decomposed(trace, weights, InitSpec.mlp_neurons(1, contiguous_bins(128, 1)),
                               max_state_elements=100_000)
        init.assert_not_called()

    def test_states_are_read_only(self):
        weights, trace = traced(length=4)
        run = run_decomposed(trace, weights, InitSpec.token_wise())
        with self.assertRaises(ValueError):
            run.final.data[0, 0, 0] = 1.0


class ReconstructTests(SimpleTestCase):

    def test_single_nonzero_component(self):
        data = np.zeros((2, 3, 4))
        data[:, 1, :] = np.arange(8).reshape(2, 4)
        np.testing.assert_array_equal(reconstruct(data), data[:, 1, :])

    def test_export_state(self):
        weights, trace = traced(length=4)
        state = init_decomposition(trace, weights, InitSpec.attention_heads(0))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'state.archive'
            export_state(state, path)
            metadata, tensors = read_archive(path)
        self.assertEqual(metadata['labels'], list(state.labels))
        self.assertEqual(metadata['point'], {'layer': 0, 'stage': 'post_attention'})
        np.testing.assert_array_equal(tensors['components'], state.data)
