import json
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase

from depass.init import InitSpec
from depass_lab.exceptions import (
    EvaluationError, InputError, InterventionError, UndefinedMetricError, UsageError
)
from depass_lab.testing import fixture_prompts, fixture_vocab, seed42_model, small_model
from model_io.archive import save_weights
from probes.linear import LinearProbe
from transformer.forward import AblationMask, forward, greedy_argmax
from .baselines import attention_rollout, baseline_scores
from .bench import ablation_oracle_neurons, bench_depass_vs_ablation, depass_neuron_scores
from .curves import curve_from_rows, export_curves
from .dataset import Example, filter_correct, greedy_targets, load_dataset, make_examples
from .faithfulness import aggregate_faithfulness, faithfulness_example, run_faithfulness
from .masking import (
    BOTTOM_K, TOP_K, MaskedModel, ablation_mask, clamp_grid, component_layout, mask_components,
    masking_spec, run_component_masking, select_components
)
from .metrics import (
    PATCH_TOP, RECOVER_TOP, InterventionSpec, apply_token_intervention, budget_count, delta_p,
    kept_positions
)
from .serializers import ExampleSerializer
from .subspace import (
    SETTINGS, depass_subspace_masking, flagged_contributions, removal_budget, run_subspace_masking
)
from .tasks import run_component_masking_distributed, run_faithfulness_distributed


def small_examples(count=4, length=6):
    return greedy_targets(fixture_prompts(count, length=length), small_model())


class MetricTests(SimpleTestCase):

    def test_delta_p(self):
        self.assertAlmostEqual(delta_p(0.5, 0.25), 0.5)
        self.assertAlmostEqual(delta_p(0.5, 0.75), 0.5)
        self.assertEqual(delta_p(0.4, 0.4), 0.0)

    def test_delta_p_is_scale_free(self):
        self.assertAlmostEqual(delta_p(0.2, 0.05), delta_p(0.8, 0.2))

    def test_delta_p_needs_positive_original(self):
        with self.assertRaises(UndefinedMetricError):
            delta_p(0.0, 0.1)

    def test_budget_count_rounds_before_ceiling(self):
        self.assertEqual(budget_count(0.3, 10), 3)
        self.assertEqual(budget_count(0.1, 15), 2)
        self.assertEqual(budget_count(1.0, 7), 7)

    def test_patch_removes_highest_non_bos_token(self):
        tokens = (0, 11, 12, 13)
        scores = (9.0, 3.0, 1.0, 2.0)
        self.assertEqual(apply_token_intervention(tokens, scores, InterventionSpec(PATCH_TOP, 1 / 3)),
                         (0, 12, 13))
        self.assertEqual(apply_token_intervention(tokens, scores, InterventionSpec(RECOVER_TOP, 1 / 3)),
                         (0, 11))

    def test_ties_remove_the_earlier_position(self):
        kept = kept_positions([0.0, 1.0, 1.0, 1.0], InterventionSpec(PATCH_TOP, 0.3))
        self.assertEqual(kept.tolist(), [0, 2, 3])

    def test_patch_and_recover_partition_the_prompt(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=12)
        for fraction in (0.1, 0.25, 0.5, 0.9, 1.0):
            patched = set(kept_positions(scores, InterventionSpec(PATCH_TOP, fraction)).tolist()) - {0}
            recovered = set(kept_positions(scores, InterventionSpec(RECOVER_TOP, fraction)).tolist()) - {0}
            self.assertFalse(patched & recovered)
            self.assertEqual(patched | recovered, set(range(1, 12)))

    def test_bos_counts_when_not_kept(self):
        with self.assertRaises(InterventionError):
            kept_positions([1.0, 2.0], InterventionSpec(PATCH_TOP, 1.0, keep_bos=False))
        kept = kept_positions([1.0, 2.0, 3.0], InterventionSpec(RECOVER_TOP, 1.0, keep_bos=False))
        self.assertEqual(kept.tolist(), [0, 1, 2])

    def test_invalid_interventions(self):
        with self.assertRaises(InputError):
            InterventionSpec(PATCH_TOP, 0.0)
        with self.assertRaises(InputError):
            InterventionSpec('shuffle', 0.5)
        with self.assertRaises(InputError):
            kept_positions([1.0, 2.0], InterventionSpec(PATCH_TOP, 0.5), length=3)


class BaselineTests(SimpleTestCase):

    def test_single_layer_rollout(self):
        attention = [np.array([[[1.0, 0.0], [0.5, 0.5]]])]
        np.testing.assert_allclose(attention_rollout(attention), [[1.0, 0.0], [0.25, 0.75]], atol=1e-12)

    def test_two_layer_rollout_multiplies_on_the_left(self):
        attention = [
            np.array([[[1.0, 0.0], [0.5, 0.5]]]),
            np.array([[[1.0, 0.0], [1.0, 0.0]]]),
        ]
        np.testing.assert_allclose(attention_rollout(attention), [[1.0, 0.0], [0.625, 0.375]], atol=1e-12)

    def test_rollout_rows_are_distributions(self):
        _, trace = forward(fixture_prompts(1, length=10)[0], seed42_model('f64'))
        rollout = attention_rollout([layer.attn_probs for layer in trace.layers])
        np.testing.assert_allclose(rollout.sum(axis=-1), np.ones(10), atol=1e-12)
        self.assertTrue(np.all(np.triu(rollout, k=1) == 0))

    def test_simple_baselines(self):
        _, trace = forward([0, 4, 5, 6], small_model())
        np.testing.assert_array_equal(baseline_scores(trace, 'uniform'), np.ones(4))
        np.testing.assert_array_equal(baseline_scores(trace, 'random', seed=3),
                                      baseline_scores(trace, 'random', seed=3))
        self.assertAlmostEqual(float(baseline_scores(trace, 'attention_last').sum()), 1.0, places=12)
        self.assertAlmostEqual(float(baseline_scores(trace, 'attention_mean').sum()), 1.0, places=12)
        with self.assertRaises(UsageError):
            baseline_scores(trace, 'gradient')


class DatasetTests(SimpleTestCase):

    def test_token_example(self):
        serializer = ExampleSerializer(data={'tokens': [0, 5, 6], 'target': 3})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['meta'], {})

    def test_text_example_uses_vocab(self):
        data = {'text': 'the a', 'target_text': 'of'}
        serializer = ExampleSerializer(data=data, context={'vocab': fixture_vocab()})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.validated_data['tokens'], [0, 1, 2])
        self.assertEqual(serializer.validated_data['target'], 4)
        self.assertFalse(ExampleSerializer(data=data).is_valid())

    def test_rejects_mixed_or_partial_forms(self):
        self.assertFalse(ExampleSerializer(data={'tokens': [0, 1]}).is_valid())
        both = {'tokens': [0, 1], 'target': 2, 'text': 'the', 'target_text': 'a'}
        self.assertFalse(ExampleSerializer(data=both, context={'vocab': fixture_vocab()}).is_valid())
        phrase = {'text': 'the', 'target_text': 'a of'}
        self.assertFalse(ExampleSerializer(data=phrase, context={'vocab': fixture_vocab()}).is_valid())

    def test_load_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'examples.jsonl'
            path.write_text('{"tokens": [0, 5], "target": 7}\n\n{"tokens": [0, 6, 8], "target": 9, '
                            '"meta": {"id": "b"}}\n', encoding='utf-8')
            examples = load_dataset(path)
        self.assertEqual(examples, [Example(0, (0, 5), 7), Example(1, (0, 6, 8), 9)])
        self.assertEqual(examples[1].meta, {'id': 'b'})

    def test_invalid_line_named(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'examples.jsonl'
            path.write_text('{"tokens": [0, 5], "target": 7}\n{"tokens": []}\n', encoding='utf-8')
            with self.assertRaisesMessage(InputError, '#2'):
                load_dataset(path)

    def test_filter_correct(self):
        weights = small_model()
        [good] = small_examples(1)
        wrong = Example(1, good.tokens, (good.target + 1) % weights.config.vocab_size)
        kept = filter_correct([good, wrong], weights)
        self.assertEqual([example for example, _, _ in kept], [good])
        with self.assertRaises(EvaluationError):
            filter_correct([wrong], weights)


class CurveTests(SimpleTestCase):

    def setUp(self):
        self.curve = curve_from_rows('depass', PATCH_TOP, [0.5, 1.0], [[0.25, 0.5], [0.75, 1.0]], [3, 8])

    def test_means_and_count(self):
        np.testing.assert_allclose(self.curve.means, [0.5, 0.75])
        self.assertEqual(self.curve.num_examples, 2)

    def test_csv_export(self):
        lines = export_curves([self.curve], 'csv').decode('utf-8').splitlines()
        self.assertEqual(lines[0], 'method,kind,K_or_k,mean_metric,n_examples')
        self.assertEqual(lines[1:], ['depass,patch_top,0.5,0.5,2', 'depass,patch_top,1.0,0.75,2'])

    def test_json_export_keeps_per_example_values(self):
        [data] = json.loads(export_curves([self.curve], 'json'))
        self.assertEqual(data['example_ids'], [3, 8])
        self.assertEqual(data['per_example'], [[0.25, 0.5], [0.75, 1.0]])

    def test_unknown_format(self):
        with self.assertRaises(UsageError):
            export_curves([self.curve], 'xlsx')


class FaithfulnessTests(SimpleTestCase):

    def test_full_recovery_changes_nothing(self):
        [example] = small_examples(1)
        result = faithfulness_example(example, small_model(), ['depass', 'uniform'], [1.0], [RECOVER_TOP])
        self.assertEqual(result['depass'][RECOVER_TOP], [0.0])
        self.assertEqual(result['uniform'][RECOVER_TOP], [0.0])

    def test_mispredicted_example_skipped(self):
        weights = small_model()
        [example] = small_examples(1)
        wrong = Example(0, example.tokens, (example.target + 1) % weights.config.vocab_size)
        self.assertIsNone(faithfulness_example(wrong, weights, ['uniform'], [0.5]))

    def test_curves_per_method_and_kind(self):
        examples = small_examples(3)
        curves = run_faithfulness(examples, small_model(), ['depass', 'random'], [0.2, 0.5, 1.0])
        self.assertEqual([(c.method, c.kind) for c in curves], [
            ('depass', PATCH_TOP), ('depass', RECOVER_TOP), ('random', PATCH_TOP), ('random', RECOVER_TOP),
        ])
        for curve in curves:
            self.assertEqual(curve.num_examples, 3)
            self.assertEqual(curve.grid, (0.2, 0.5, 1.0))
            self.assertTrue(np.all(curve.means >= 0))

    def test_nothing_to_aggregate(self):
        with self.assertRaises(EvaluationError):
            aggregate_faithfulness(small_examples(2), [None, None], ['uniform'], [0.5])


class ComponentMaskingTests(SimpleTestCase):

    def test_masking_nothing_keeps_accuracy(self):
        curves = run_component_masking(small_examples(), small_model(), InitSpec.attention_heads(1),
                                       'depass', [0])
        for curve in curves:
            np.testing.assert_array_equal(curve.means, [1.0])

    def test_top_and_bottom_agree_when_masking_everything(self):
        weights = small_model()
        top, bottom = run_component_masking(small_examples(), weights, InitSpec.attention_heads(0), 'norm',
                                            [weights.config.num_heads])
        self.assertEqual((top.kind, bottom.kind), (TOP_K, BOTTOM_K))
        np.testing.assert_array_equal(top.means, bottom.means)

    def test_masking_every_head_matches_zero_output_projection(self):
        weights = small_model()
        model = mask_components(weights, InitSpec.attention_heads(1), range(weights.config.num_heads))
        masked, _ = model.forward([0, 3, 4, 5])
        expected, _ = forward([0, 3, 4, 5], weights.with_layer(1, wo=np.zeros_like(weights.layers[1].wo)))
        np.testing.assert_allclose(masked, expected, atol=1e-12)

    def test_masking_every_head_at_every_layer_leaves_embedding_and_mlp_path(self):
        weights = seed42_model('f64')
        config = weights.config
        heads = frozenset().union(*(
            ablation_mask(config, InitSpec.attention_heads(layer), range(config.num_heads)).heads
            for layer in range(config.num_layers)
        ))
        self.assertEqual(len(heads), config.num_layers * config.num_heads)
        masked, _ = MaskedModel(weights, AblationMask(heads=heads)).forward([0, 3, 4, 5, 9])
        for index, layer in enumerate(weights.layers):
            weights = weights.with_layer(index, wo=np.zeros_like(layer.wo))
        expected, _ = forward([0, 3, 4, 5, 9], weights)
        np.testing.assert_allclose(masked, expected, atol=1e-12)

    def test_random_scores_give_no_top_bottom_gap(self):
        weights = seed42_model()
        examples = greedy_targets(fixture_prompts(3, length=8), weights)
        spec = InitSpec.attention_heads(2)
        top, bottom = [], []
        for seed in range(50):
            top_curve, bottom_curve = run_component_masking(examples, weights, spec, 'random', [2], seed=seed)
            top.append(float(top_curve.means[0]))
            bottom.append(float(bottom_curve.means[0]))
        gap = abs(np.mean(top) - np.mean(bottom))
        self.assertLessEqual(gap, np.std(top) + np.std(bottom) + 1e-12)

    def test_masking_one_neuron_matches_zeroed_down_column(self):
        weights = small_model()
        spec = InitSpec.mlp_neurons(0, [(k,) for k in range(weights.config.d_mlp)])
        masked, _ = mask_components(weights, spec, [3]).forward([0, 3, 4, 5])
        w_down = np.array(weights.layers[0].w_down)
        w_down[:, 3] = 0
        expected, _ = forward([0, 3, 4, 5], weights.with_layer(0, w_down=w_down))
        np.testing.assert_allclose(masked, expected, atol=1e-12)

    def test_neuron_groups_expand(self):
        config = small_model().config
        mask = ablation_mask(config, InitSpec.mlp_neurons(1, [range(0, 16), range(16, 32)]), [1])
        self.assertEqual(mask, AblationMask(neurons=frozenset((1, n) for n in range(16, 32))))

    def test_residual_cannot_be_masked(self):
        config = small_model().config
        with self.assertRaises(UsageError):
            ablation_mask(config, InitSpec.attention_heads(0), [config.num_heads])
        with self.assertRaises(InputError):
            ablation_mask(config, InitSpec.attention_heads(0), [config.num_heads + 1])
        with self.assertRaises(UsageError):
            ablation_mask(config, InitSpec.token_wise(), [0])

    def test_select_components(self):
        scores = np.array([0.1, 0.5, 0.3])
        self.assertEqual(select_components(scores, 2, TOP_K).tolist(), [1, 2])
        self.assertEqual(select_components(scores, 2, BOTTOM_K).tolist(), [0, 2])
        with self.assertRaises(UsageError):
            select_components(scores, 1, 'middle_k')

    def test_grid_clamped_with_warning(self):
        with self.assertLogs('evaluation.masking', 'WARNING'):
            self.assertEqual(clamp_grid([0, 2, 9], 4), [0, 2, 4])
        with self.assertRaises(InputError):
            clamp_grid([-1], 4)

    def test_unknown_method_and_decomposition(self):
        with self.assertRaises(UsageError):
            run_component_masking(small_examples(1), small_model(), InitSpec.attention_heads(0), 'saliency',
                                  [1])
        with self.assertRaises(UsageError):
            masking_spec('token_wise', 0)
        self.assertEqual(masking_spec('heads', 1).kind, 'attention_heads')

    def test_component_layout(self):
        layout = component_layout(small_examples(2), small_model(), 'heads', [0, 1])
        self.assertEqual(layout.scores.shape, (2, 2))
        self.assertEqual(layout.labels, ('H0', 'H1'))
        self.assertEqual(layout.num_examples, 2)


class SubspaceMaskingTests(SimpleTestCase):

    def probe(self, bias, layer=1):
        width = small_model().config.d_model
        return LinearProbe(np.zeros((2, width)), bias, (0, 1), layer=layer)

    def test_removal_budget(self):
        self.assertEqual(removal_budget(10, 3, 0.5), 3)
        self.assertEqual(removal_budget(10, 8, 0.5), 5)
        self.assertEqual(removal_budget(10, 4, 0.5, 'flagged'), 2)
        with self.assertRaises(InputError):
            removal_budget(10, 4, 0.0)
        with self.assertRaises(InputError):
            removal_budget(10, 4, 0.5, 'tokens')

    def test_flagged_contributions_average_flagged_positions(self):
        probe = LinearProbe([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.0], (0, 1), layer=1)
        data = np.zeros((3, 3, 2))
        data[1] = [[1.0, 0.0], [2.0, 0.0], [3.0, 5.0]]
        data[2] = [[3.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]
        run = SimpleNamespace(snapshots={1: data})
        np.testing.assert_allclose(flagged_contributions(run, [probe], [1, 2]), [2.0, 1.0, 1.0])

    def test_unflagged_prompt_unchanged(self):
        weights = small_model()
        _, trace = forward([0, 3, 4, 5, 6], weights)
        result = depass_subspace_masking(trace, weights, [self.probe([0.0, 0.0])], 0.5)
        self.assertEqual(result.flagged, ())
        self.assertEqual(result.flag_masked, trace.tokens)
        self.assertEqual(result.depass_masked, trace.tokens)

    def test_flagged_prompt_loses_equal_budgets(self):
        weights = small_model()
        _, trace = forward(fixture_prompts(1, length=8)[0], weights)
        result = depass_subspace_masking(trace, weights, [self.probe([0.0, 10.0])], 0.5)
        self.assertEqual(result.flagged, tuple(range(1, 8)))
        self.assertEqual(len(result.flag_removed), 4)
        self.assertEqual(len(result.depass_removed), 4)
        self.assertNotIn(0, result.depass_removed)
        self.assertEqual(result.depass_masked[0], trace.tokens[0])

    def test_curve_over_settings(self):
        curve = run_subspace_masking(small_examples(3), small_model(), [self.probe([0.0, 10.0])], 0.25)
        self.assertEqual(curve.grid, SETTINGS)
        self.assertEqual(curve.kind, 'budget=0.25')
        self.assertEqual(curve.means[0], 1.0)
        with self.assertRaises(EvaluationError):
            run_subspace_masking([], small_model(), [self.probe([0.0, 10.0])], 0.25)


class BenchTests(SimpleTestCase):

    def test_oracle_scores_are_logit_drops(self):
        weights = small_model()
        [example] = small_examples(1)
        oracle = ablation_oracle_neurons([example], weights, 1)
        w_down = np.array(weights.layers[1].w_down)
        w_down[:, 5] = 0
        logits, _ = forward(example.tokens, weights.with_layer(1, w_down=w_down))
        base, _ = forward(example.tokens, weights)
        expected = float(base[-1, example.target]) - float(logits[-1, example.target])
        self.assertAlmostEqual(float(oracle.scores[5]), expected, delta=1e-10)

    def test_dead_neuron_scores_zero_both_ways(self):
        weights = small_model()
        w_up = np.array(weights.layers[1].w_up)
        w_up[7] = 0
        weights = weights.with_layer(1, w_up=w_up)
        examples = greedy_targets(fixture_prompts(2, length=6), weights)
        self.assertEqual(float(depass_neuron_scores(examples, weights, 1).scores[7]), 0.0)
        self.assertEqual(float(ablation_oracle_neurons(examples, weights, 1).scores[7]), 0.0)
        spec = InitSpec.mlp_neurons(1, [(k,) for k in range(weights.config.d_mlp)])
        model = mask_components(weights, spec, [7])
        for example in examples:
            predicted, _ = model.predict(example.tokens)
            self.assertEqual(predicted, example.target)
            masked, _ = model.forward(example.tokens)
            base, _ = forward(example.tokens, weights)
            np.testing.assert_allclose(masked, base, atol=1e-12)

    def test_depass_is_faster_than_ablation(self):
        weights = seed42_model()
        examples = greedy_targets(fixture_prompts(2, length=8), weights)
        result = bench_depass_vs_ablation(examples, weights, weights.config.num_layers - 1)
        self.assertEqual(result.d_mlp, 128)
        self.assertGreater(result.t_ablation, result.t_depass)
        self.assertAlmostEqual(result.speedup, result.t_ablation / result.t_depass)


class DistributedTests(SimpleTestCase):

    def test_eager_tasks_match_in_process_runs(self):
        weights = small_model()
        examples = make_examples(
            [(tokens, greedy_argmax(forward(tokens, weights)[0][-1])) for tokens in fixture_prompts(3, 6)]
        )
        with tempfile.TemporaryDirectory() as tmp:
            path = str(Path(tmp) / 'model.archive')
            save_weights(weights, path)
            distributed = run_faithfulness_distributed(path, examples, ['depass', 'uniform'], [0.5, 1.0])
            masked = run_component_masking_distributed(path, examples, 'heads', 1, 'depass', [0, 1])
        local = run_faithfulness(examples, weights, ['depass', 'uniform'], [0.5, 1.0])
        for remote, expected in zip(distributed, local):
            self.assertEqual((remote.method, remote.kind), (expected.method, expected.kind))
            np.testing.assert_allclose(remote.means, expected.means, atol=1e-12)
        local_masked = run_component_masking(examples, weights, InitSpec.attention_heads(1), 'depass', [0, 1])
        for remote, expected in zip(masked, local_masked):
            np.testing.assert_array_equal(remote.means, expected.means)
