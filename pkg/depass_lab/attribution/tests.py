from dataclasses import replace
from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase

from depass.init import InitSpec, contiguous_bins, groups_from_word_spans
from depass.runner import run_decomposed
from depass.state import DecomposedState, Stage, StatePoint
from depass_lab.exceptions import AttributionError, ConsistencyError, InputError, UsageError
from depass_lab.testing import fixture_prompts, fixture_tokens, seed42_model, small_model
from transformer.forward import forward, greedy_argmax
from .reports import (
    Target, build_report, check_completeness, export_report, parse_report, render_heatmap_text, shade_levels
)
from .scores import (
    component_importance, decode_components, direction_attribution, direction_contributions,
    logit_attribution, normalize_scores, snapshot_at
)


def final_state(components):
    data = np.asarray(components, dtype=np.float64)[None, :, :]
    labels = tuple(f'c{m}' for m in range(data.shape[1]))
    return DecomposedState(data, labels, 0, StatePoint(1, Stage.POST_FINAL_NORM), 'token_wise')


class LogitAttributionTests(SimpleTestCase):

    def test_direct_dot_products(self):
        scores = logit_attribution(final_state([[0.5, 9.0], [0.3, -2.0]]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(scores[0], [0.5, 0.3])
        self.assertAlmostEqual(float(scores[0].sum()), 0.8)

    def test_single_component_is_full_logit(self):
        weights = seed42_model('f64')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise([range(16)]))
        y = greedy_argmax(trace.logits[-1])
        scores = logit_attribution(run.final_normed, weights.lm_head[y])
        self.assertAlmostEqual(float(scores[-1, 0]), float(trace.logits[-1, y]), delta=1e-8)

    def test_rejects_residual_states(self):
        weights = small_model()
        _, trace = forward([0, 1, 2], weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise())
        with self.assertRaises(AttributionError):
            logit_attribution(run.final, weights.lm_head[0])

    def test_completeness_on_random_pairs(self):
        weights = seed42_model('f32')
        rng = np.random.default_rng(11)
        for tokens in fixture_prompts(20, length=8, seed=11):
            _, trace = forward(tokens, weights)
            y = int(rng.integers(0, 97))
            run = run_decomposed(trace, weights, InitSpec.token_wise())
            total = float(logit_attribution(run.final_normed, weights.lm_head[y])[-1].sum())
            logit = float(trace.logits[-1, y])
            self.assertLessEqual(abs(total - logit), 1e-4 * max(abs(logit), 1.0))

    def test_target_sensitivity(self):
        weights = seed42_model('f64')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise())
        rankings = {
            tuple(np.argsort(-logit_attribution(run.final_normed, weights.lm_head[y])[-1]))
            for y in range(10)
        }
        self.assertGreater(len(rankings), 1)


class DirectionAttributionTests(SimpleTestCase):

    def test_zero_direction(self):
        scores = direction_attribution(final_state([[0.5, 9.0], [0.3, -2.0]]), np.zeros(2))
        np.testing.assert_array_equal(scores, 0)

    def test_unit_direction(self):
        scores = direction_attribution(final_state([[0.5, 9.0], [0.3, -2.0]]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(scores[0], [0.5, 0.3])

    def test_completeness_against_trace(self):
        weights = seed42_model('f32')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise(), snapshot_layers={1, 2, 3})
        v = np.random.default_rng(12).normal(size=64).astype(np.float32)
        for layer in (1, 2, 3):
            scores = direction_attribution(snapshot_at(run, layer), v)
            expected = trace.hidden(layer) @ v
            np.testing.assert_allclose(scores.sum(axis=1), expected,
                                       atol=1e-4 * max(1.0, float(np.abs(expected).max())))

    def test_missing_snapshot(self):
        weights = small_model()
        _, trace = forward([0, 1, 2], weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise(), snapshot_layers={1})
        with self.assertRaises(AttributionError):
            snapshot_at(run, 2)

    def test_wrong_width(self):
        with self.assertRaises(AttributionError):
            direction_attribution(final_state([[1.0, 2.0]]), np.ones(3))

    def test_contributions_table(self):
        weights = seed42_model('f64')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.token_wise(), snapshot_layers={2})
        v = np.random.default_rng(13).normal(size=64)
        table = direction_contributions(run, 2, v, top_k=16)
        self.assertAlmostEqual(table['activation'], float(trace.hidden(2)[-1] @ v), delta=1e-8)
        magnitudes = [abs(row['score']) for row in table['contributions']]
        self.assertEqual(magnitudes, sorted(magnitudes, reverse=True))
        self.assertEqual(len(direction_contributions(run, 2, v, top_k=3)['contributions']), 3)


class ComponentImportanceTests(SimpleTestCase):

    def test_depass_abs(self):
        run = SimpleNamespace(final_normed=final_state([[-2.0, 0.0], [3.0, 0.0]]))
        scores = component_importance(run, 'depass_abs', np.array([1.0, 0.0]))
        np.testing.assert_array_equal(scores[0], [2.0, 3.0])

    def test_zero_component_has_zero_norm(self):
        weights = seed42_model('f64')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.subspace(2, np.eye(64)))
        scores = component_importance(run, 'norm')
        np.testing.assert_array_equal(scores[:, 1], 0)
        np.testing.assert_allclose(scores[:, 0], np.linalg.norm(trace.hidden(2), axis=1))

    def test_coef_sums_activations_per_bin(self):
        weights = seed42_model('f64')
        _, trace = forward(fixture_tokens(), weights)
        run = run_decomposed(trace, weights, InitSpec.mlp_neurons(2, contiguous_bins(128, 16)))
        scores = component_importance(run, 'coef', trace=trace)
        activations = np.abs(trace.layers[2].mlp_activations)
        for g in range(8):
            expected = activations[:, list(range(g * 16, (g + 1) * 16))].sum(axis=1)
            np.testing.assert_array_equal(scores[:, g], expected)
        np.testing.assert_array_equal(scores[:, 8], 0)

    def test_coef_needs_neuron_decomposition(self):
        weights = small_model()
        _, trace = forward([0, 1, 2], weights)
        run = run_decomposed(trace, weights, InitSpec.attention_heads(0))
        with self.assertRaises(UsageError):
            component_importance(run, 'coef', trace=trace)

    def test_unknown_method(self):
        with self.assertRaises(UsageError):
            component_importance(SimpleNamespace(), 'saliency')

    def test_normalized_scores(self):
        np.testing.assert_allclose(normalize_scores([-2.0, 3.0]), [-0.4, 0.6])
        np.testing.assert_array_equal(normalize_scores([0.0, 0.0]), [0.0, 0.0])


class ReportTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.weights = seed42_model('f64')
        _, cls.trace = forward(fixture_tokens(), cls.weights)
        cls.target = greedy_argmax(cls.trace.logits[-1])

    def token_report(self, **kwargs):
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise())
        return build_report(run, self.trace, self.weights, Target.logit(self.target), **kwargs)

    def test_report_is_complete(self):
        report = self.token_report()
        self.assertEqual(report.position, 15)
        self.assertAlmostEqual(float(report.scores.sum()), float(self.trace.logits[-1, self.target]),
                               delta=1e-8)
        self.assertAlmostEqual(float(np.abs(report.normalized_scores).sum()), 1.0)

    def test_completeness_check_passes_on_depass_scores(self):
        self.assertLess(check_completeness(self.token_report(position='all'), self.trace), 1e-8)

    def test_completeness_check_catches_mismatched_target(self):
        report = replace(self.token_report(), target=Target.logit((self.target + 1) % 97))
        with self.assertRaises(ConsistencyError):
            check_completeness(report, self.trace)

    def test_completeness_check_needs_signed_scores(self):
        with self.assertRaises(UsageError):
            check_completeness(self.token_report(method='norm'), self.trace)

    def test_json_round_trip_is_exact(self):
        report = self.token_report(position='all')
        parsed = parse_report(export_report(report, 'json'))
        np.testing.assert_array_equal(parsed.scores, report.scores)
        np.testing.assert_array_equal(parsed.normalized_scores, report.normalized_scores)
        self.assertEqual(parsed.labels, report.labels)
        self.assertEqual(parsed.token_ids, report.token_ids)
        self.assertEqual(parsed.target.token_id, self.target)
        self.assertIsNone(parsed.position)

    def test_csv_one_row_per_component(self):
        run = run_decomposed(self.trace, self.weights, InitSpec.subspace(1, np.eye(64)))
        report = build_report(run, self.trace, self.weights, Target.logit(3))
        lines = export_report(report, 'csv').decode('utf-8').splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[0].startswith('position,token_id,component'))

    def test_direction_target(self):
        v = np.random.default_rng(14).normal(size=64)
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise(), snapshot_layers={3})
        report = build_report(run, self.trace, self.weights, Target.direction(3, v, 'probe'))
        self.assertAlmostEqual(float(report.scores.sum()), float(self.trace.hidden(3)[-1] @ v), delta=1e-8)
        self.assertEqual(str(report.target), 'direction:probe@3')

    def test_direction_target_rejects_norm(self):
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise(), snapshot_layers={3})
        with self.assertRaises(UsageError):
            build_report(run, self.trace, self.weights, Target.direction(3, np.ones(64)), method='norm')

    def test_target_out_of_vocabulary(self):
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise())
        with self.assertRaises(AttributionError):
            build_report(run, self.trace, self.weights, Target.logit(97))

    def test_mismatched_model_fails_fast(self):
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise())
        with self.assertRaises(AttributionError):
            build_report(run, self.trace, seed42_model('f32'), Target.logit(0))

    def test_word_grouped_report(self):
        groups = groups_from_word_spans([(1, 3), (5, 8)], 16)
        run = run_decomposed(self.trace, self.weights, InitSpec.token_wise(groups))
        report = build_report(run, self.trace, self.weights, Target.logit(self.target))
        self.assertEqual(len(report.labels), 13)
        self.assertIn('pos1+2', report.labels)

    def test_invalid_report_rejected(self):
        with self.assertRaises(InputError):
            parse_report(b'{"method": "depass"}')
        with self.assertRaises(InputError):
            parse_report(b'not json')

    def test_quantile_shading_is_monotone(self):
        self.assertEqual(list(shade_levels([1, 2, 3, 4, 5])), [0, 1, 2, 3, 4])

    def test_heatmap_lists_components(self):
        text = render_heatmap_text(self.token_report())
        for label in ('pos0:0', 'pos15:'):
            self.assertIn(label, text)
        grid = render_heatmap_text(self.token_report(position='all'))
        self.assertEqual(len(grid.splitlines()), 2 + 16)

    def test_decode_components(self):
        run = run_decomposed(self.trace, self.weights, InitSpec.subspace(2, np.eye(64)))
        decoded = decode_components(run, self.weights, top_k=4)
        self.assertEqual([entry['label'] for entry in decoded], ['parallel', 'orthogonal'])
        logits = [token['logit'] for token in decoded[0]['tokens']]
        self.assertEqual(logits, sorted(logits, reverse=True))
        self.assertEqual(len(logits), 4)
