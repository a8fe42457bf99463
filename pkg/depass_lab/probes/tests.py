import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from depass_lab.exceptions import ArchiveFormatError, DegenerateSubspaceError, InputError, TrainingError
from depass_lab.testing import separable_points, small_model
from model_io.archive import write_archive
from transformer.forward import forward
from transformer.trace import export_trace
from .linear import (
    LinearProbe, flag_tokens, load_probes, mean_untruthful_probability, probe_accuracy,
    probe_predict, resolve_min_layer, save_probes, train_probe
)
from .projection import (
    load_directions, load_projection, projection_from_directions, save_projection, split_subspace
)
from .serializers import load_feature_dataset
from .suite import balanced_split, train_layer_probes


class StaticTrace:
    """Stand-in trace whose residual states are given per layer."""

    def __init__(self, states):
        self.states = [np.asarray(s, dtype=np.float64) for s in states]

    @property
    def num_layers(self):
        return len(self.states) - 1

    @property
    def num_positions(self):
        return self.states[0].shape[0]

    def hidden(self, index):
        return self.states[index]


def svd_projector(W, tolerance=1e-8):
    u, s, _ = np.linalg.svd(np.asarray(W, dtype=np.float64).T, full_matrices=False)
    basis = u[:, s > tolerance * s[0]]
    return basis @ basis.T


class TrainProbeTests(SimpleTestCase):

    def test_one_dimensional_separable(self):
        features = np.array([[-1.0]] * 50 + [[1.0]] * 50)
        labels = np.array([0] * 50 + [1] * 50)
        probe = train_probe(features, labels, lr=0.1, steps=500)
        self.assertEqual(probe.train_accuracy, 1.0)
        self.assertEqual(probe.classes, (0, 1))

    def test_separable_points_with_default_recipe(self):
        features, labels = separable_points(count=200, width=16, margin=1.0)
        probe = train_probe(features, labels, lr=0.01, steps=1000)
        self.assertGreaterEqual(probe.train_accuracy, 0.99)
        self.assertEqual(probe_accuracy(probe, features, labels), probe.train_accuracy)
        self.assertEqual(len(probe.loss_history), 1001)

    def test_loss_is_non_increasing(self):
        features, labels = separable_points(count=100, width=8, seed=3)
        probe = train_probe(features, labels, lr=0.01, steps=300)
        self.assertTrue(np.all(np.diff(probe.loss_history) <= 1e-12))

    def test_uninformative_features_predict_majority(self):
        features = np.zeros((50, 4))
        labels = np.array([0] * 30 + [1] * 20)
        probe = train_probe(features, labels, lr=0.1, steps=200)
        self.assertAlmostEqual(probe.train_accuracy, 0.6)
        self.assertTrue(np.all(np.argmax(probe_predict(probe, features), axis=1) == 0))

    def test_duplicated_points_give_the_same_probe(self):
        features, labels = separable_points(count=40, width=6, seed=5)
        single = train_probe(features, labels, lr=0.05, steps=200)
        double = train_probe(np.vstack([features, features]), np.concatenate([labels, labels]),
                             lr=0.05, steps=200)
        np.testing.assert_allclose(double.weights, single.weights, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(double.bias, single.bias, rtol=1e-9, atol=1e-12)

    def test_seed_only_changes_order(self):
        features, labels = separable_points(count=60, width=6, seed=6)
        first = train_probe(features, labels, lr=0.05, steps=100, seed=0)
        second = train_probe(features, labels, lr=0.05, steps=100, seed=9)
        np.testing.assert_allclose(first.weights, second.weights, rtol=1e-9, atol=1e-12)

    def test_single_class_is_rejected(self):
        with self.assertRaises(TrainingError):
            train_probe(np.ones((5, 3)), np.zeros(5, dtype=int), steps=10)

    def test_mismatched_inputs(self):
        with self.assertRaises(InputError):
            train_probe(np.ones((5, 3)), [0, 1], steps=10)
        with self.assertRaises(InputError):
            train_probe(np.full((2, 3), np.nan), [0, 1], steps=10)


class ProbePredictTests(SimpleTestCase):

    def test_zero_probe_is_uniform(self):
        probe = LinearProbe(np.zeros((2, 3)), np.zeros(2), (0, 1))
        np.testing.assert_array_equal(probe_predict(probe, np.ones(3)), [0.5, 0.5])

    def test_width_mismatch(self):
        probe = LinearProbe(np.zeros((2, 3)), np.zeros(2), (0, 1))
        with self.assertRaises(InputError):
            probe_predict(probe, np.ones(4))

    def test_positive_scaling_keeps_argmax(self):
        rng = np.random.default_rng(8)
        W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
        x = rng.normal(size=(40, 5))
        base = LinearProbe(W, b, (0, 1, 2))
        scaled = LinearProbe(W * 3.5, b * 3.5, (0, 1, 2))
        np.testing.assert_array_equal(np.argmax(probe_predict(base, x), axis=1),
                                      np.argmax(probe_predict(scaled, x), axis=1))

    def test_needs_two_classes(self):
        with self.assertRaises(TrainingError):
            LinearProbe(np.zeros((1, 3)), np.zeros(1), (0,))

    def test_direction_is_row_difference(self):
        probe = LinearProbe(np.array([[1.0, 2.0], [4.0, 3.0]]), np.zeros(2), (0, 1))
        np.testing.assert_array_equal(probe.direction(1), [3.0, 1.0])

    def test_flag_threshold(self):
        self.assertEqual(list(flag_tokens([0.4, 0.6])), [False, True])
        self.assertEqual(list(flag_tokens([0.5])), [False])

    def test_band_start(self):
        self.assertEqual(resolve_min_layer(32), 10)
        self.assertEqual(resolve_min_layer(4), 2)
        self.assertEqual(resolve_min_layer(5), 3)
        self.assertEqual(resolve_min_layer(4, 1), 1)
        with self.assertRaises(InputError):
            resolve_min_layer(4, 7)

    def test_untruthful_token_is_flagged(self):
        states = np.array([[-5.0, 0.0], [5.0, 0.0], [-5.0, 1.0]])
        trace = StaticTrace([states] * 5)
        probes = [
            LinearProbe(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.zeros(2), (0, 1), layer=layer)
            for layer in range(5)
        ]
        means = mean_untruthful_probability(trace, probes)
        self.assertEqual(list(flag_tokens(means)), [False, True, False])

    def test_band_averages_only_late_layers(self):
        early = np.array([[5.0, 0.0]])
        late = np.array([[-5.0, 0.0]])
        trace = StaticTrace([early, early, early, late, late])
        probes = [
            LinearProbe(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.zeros(2), (0, 1), layer=layer)
            for layer in range(5)
        ]
        self.assertFalse(flag_tokens(mean_untruthful_probability(trace, probes))[0])
        self.assertTrue(flag_tokens(mean_untruthful_probability(trace, probes, min_layer=0))[0])

    def test_no_probe_in_band(self):
        trace = StaticTrace([np.zeros((1, 2))] * 5)
        probe = LinearProbe(np.zeros((2, 2)), np.zeros(2), (0, 1), layer=0)
        with self.assertRaises(InputError):
            mean_untruthful_probability(trace, [probe])

    def test_archive_round_trip(self):
        features, labels = separable_points(count=40, width=4, seed=2)
        probes = [train_probe(features, labels, steps=50, layer=layer) for layer in (1, 2)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'probes.archive'
            save_probes(probes, path)
            loaded = load_probes(path)
            directions = load_directions(path, layer=2)
        self.assertEqual([p.layer for p in loaded], [1, 2])
        np.testing.assert_array_equal(loaded[1].weights, probes[1].weights)
        np.testing.assert_array_equal(directions, probes[1].weights)
        self.assertEqual(loaded[0].final_loss, probes[0].final_loss)


class ProjectionTests(SimpleTestCase):

    def test_single_axis(self):
        e1 = np.eye(6)[0]
        projection = projection_from_directions([e1])
        expected = np.zeros((6, 6))
        expected[0, 0] = 1.0
        np.testing.assert_allclose(projection.matrix, expected, atol=1e-15)
        self.assertEqual(projection.rank, 1)

    def test_rank_deficient_directions(self):
        e1 = np.eye(6)[0]
        projection = projection_from_directions([e1, 2 * e1])
        self.assertEqual(projection.rank, 1)
        np.testing.assert_allclose(projection.matrix, projection_from_directions([e1]).matrix, atol=1e-15)

        rng = np.random.default_rng(4)
        W = rng.normal(size=(3, 8))
        self.assertEqual(projection_from_directions(np.vstack([W, W[0] + W[1]])).rank, 3)

    def test_agrees_with_svd_projector(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            W = rng.normal(size=(3, 8))
            projection = projection_from_directions(W)
            self.assertEqual(projection.rank, 3)
            self.assertLessEqual(np.abs(projection.matrix - svd_projector(W)).max(), 1e-8)

    def test_projector_algebra(self):
        rng = np.random.default_rng(22)
        W = rng.normal(size=(3, 8))
        projection = projection_from_directions(W)
        P = projection.matrix
        self.assertLessEqual(np.abs(P - P.T).max(), 1e-8)
        self.assertLessEqual(np.abs(P @ P - P).max(), 1e-6)
        self.assertAlmostEqual(float(np.trace(P)), 3.0, delta=1e-4)
        self.assertLessEqual(np.abs(P @ projection.complement()).max(), 1e-6)
        np.testing.assert_allclose(P + projection.complement(), np.eye(8), atol=1e-15)
        in_span = W.T @ rng.normal(size=3)
        np.testing.assert_allclose(P @ in_span, in_span, atol=1e-10)

    def test_projection_archive_without_rank(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'proj.archive'
            write_archive(path, [('projector', np.eye(4)), ('basis', np.eye(4))], {'kind': 'projection'})
            with self.assertRaises(ArchiveFormatError):
                load_projection(path)

    def test_zero_directions(self):
        with self.assertRaises(DegenerateSubspaceError):
            projection_from_directions(np.zeros((2, 5)))

    def test_split_axis_example(self):
        parallel, orthogonal = split_subspace(np.array([3.0, 4.0]), np.diag([1.0, 0.0]))
        np.testing.assert_array_equal(parallel, [3.0, 0.0])
        np.testing.assert_array_equal(orthogonal, [0.0, 4.0])

    def test_split_is_orthogonal(self):
        rng = np.random.default_rng(23)
        W = rng.normal(size=(3, 8))
        projection = projection_from_directions(W)
        x = rng.normal(size=(10, 8))
        parallel, orthogonal = split_subspace(x, projection)
        np.testing.assert_allclose(parallel + orthogonal, x, rtol=0, atol=1e-14)
        residual = np.abs(np.sum(parallel * orthogonal, axis=1))
        self.assertTrue(np.all(residual <= 1e-10 * np.sum(x * x, axis=1)))

        _, inside = split_subspace(W[0], projection)
        np.testing.assert_allclose(inside, 0, atol=1e-10)

    def test_split_width_mismatch(self):
        with self.assertRaises(InputError):
            split_subspace(np.ones(3), np.eye(4))

    def test_archive_round_trip(self):
        projection = projection_from_directions(np.random.default_rng(24).normal(size=(2, 8)))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'proj.archive'
            save_projection(projection, path)
            loaded = load_projection(path)
            write_archive(Path(tmp) / 'dirs.archive', [('directions', np.eye(8)[:2])])
            directions = load_directions(Path(tmp) / 'dirs.archive')
        np.testing.assert_array_equal(loaded.matrix, projection.matrix)
        self.assertEqual(loaded.rank, 2)
        np.testing.assert_array_equal(directions, np.eye(8)[:2])


class ProbeSuiteTests(SimpleTestCase):

    def layered_traces(self, count=40):
        """Layer 1 carries no label signal; layer 3 separates the classes."""
        rng = np.random.default_rng(31)
        labels = np.arange(count) % 2
        traces = []
        for label in labels:
            states = [rng.normal(size=(3, 6)) for _ in range(4)]
            states[3][-1, 0] = (2 * label - 1) * (2.0 + rng.random())
            traces.append(StaticTrace(states))
        return traces, labels

    def test_balanced_split(self):
        labels = np.array([0] * 8 + [1] * 4)
        train, test = balanced_split(labels, 0.25, seed=1)
        self.assertEqual(len(test), 3)
        self.assertEqual(sorted(np.concatenate([train, test]).tolist()), list(range(12)))
        self.assertEqual(int(np.sum(labels[test] == 1)), 1)

    def test_split_is_deterministic(self):
        labels = np.arange(20) % 3
        first = balanced_split(labels, 0.3, seed=4)
        second = balanced_split(labels, 0.3, seed=4)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_suite_finds_the_informative_layer(self):
        traces, labels = self.layered_traces()
        report = train_layer_probes(traces, labels, lr=0.5, steps=300)
        self.assertEqual([r.layer for r in report.results], [1, 2, 3])
        self.assertEqual(report.best_layer, 3)
        self.assertEqual(report.results[-1].test_accuracy, 1.0)
        self.assertEqual(report.train_size + report.test_size, 40)
        self.assertEqual(len(report.rows()), 3)

    def test_suite_on_model_traces(self):
        weights = small_model()
        prompts = [[0, 3 + i, 10 + i, 5 if i % 2 else 6] for i in range(12)]
        traces = [forward(tokens, weights)[1] for tokens in prompts]
        labels = [i % 2 for i in range(12)]
        report = train_layer_probes(traces, labels, layers=[2], steps=20)
        self.assertEqual(report.results[0].probe.layer, 2)
        self.assertEqual(report.results[0].probe.width, 16)
        self.assertEqual(report.test_size, 2)
        self.assertTrue(0.0 <= report.results[0].test_accuracy <= 1.0)

    def test_mismatched_labels(self):
        traces, _ = self.layered_traces(count=4)
        with self.assertRaises(InputError):
            train_layer_probes(traces, [0, 1])


class FeatureDatasetTests(SimpleTestCase):

    def write_lines(self, tmp, records, name='features.jsonl'):
        path = Path(tmp) / name
        path.write_text('\n'.join(json.dumps(record) for record in records) + '\n', encoding='utf-8')
        return path

    def test_inline_features_grouped_by_layer(self):
        records = [
            {'features': [1.0, 0.0], 'label': 0, 'layer': 2},
            {'features': [0.0, 1.0], 'label': 1, 'layer': 2},
            {'features': [1.0, 1.0, 1.0], 'label': 1},
        ]
        with tempfile.TemporaryDirectory() as tmp:
            dataset = load_feature_dataset(self.write_lines(tmp, records))
        features, labels = dataset[2]
        np.testing.assert_array_equal(features, [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(labels, [0, 1])
        self.assertEqual(dataset[None][0].shape, (1, 3))

    def test_features_from_trace_reference(self):
        weights = small_model()
        _, trace = forward([0, 4, 9], weights)
        with tempfile.TemporaryDirectory() as tmp:
            export_trace(trace, Path(tmp) / 'trace.archive')
            records = [{'features_ref': {'trace': 'trace.archive', 'layer': 1}, 'label': 1}]
            dataset = load_feature_dataset(self.write_lines(tmp, records))
        features, labels = dataset[1]
        np.testing.assert_array_equal(features[0], trace.hidden(1)[-1])
        np.testing.assert_array_equal(labels, [1])

    def test_invalid_records(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(InputError):
                load_feature_dataset(self.write_lines(tmp, [{'label': 0}]))
            with self.assertRaises(InputError):
                load_feature_dataset(self.write_lines(tmp, [
                    {'features': [1.0], 'label': 0, 'layer': 1},
                    {'features': [1.0, 2.0], 'label': 1, 'layer': 1},
                ]))
            broken = Path(tmp) / 'broken.jsonl'
            broken.write_text('{"features": [1.0], "label": 0}\n{not json\n', encoding='utf-8')
            with self.assertRaises(InputError):
                load_feature_dataset(broken)
