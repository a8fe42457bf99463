import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from attribution.reports import parse_report
from depass_lab.testing import (
    FIXTURE_DIR, fixture_config_data, fixture_prompts, fixture_tokens, seed42_model, separable_points,
    small_model
)
from model_io.archive import load_weights, save_weights, write_archive
from probes.linear import LinearProbe, load_probes, save_probes
from probes.projection import load_projection
from transformer.forward import forward, greedy_argmax
from transformer.trace import load_trace
from .artifacts import MANIFEST_SUFFIX, manifest_path, staged_output
from .management.commands.attribute import Command as AttributeCommand

SMALL_CONFIG = dict(num_layers=2, d_model=16, d_mlp=32, num_heads=2, num_kv_heads=2, numeric_precision='f64')


def run(*args):
    """call_command with captured output; returns (stdout, stderr)."""
    stdout, stderr = StringIO(), StringIO()
    call_command(*[str(arg) for arg in args], stdout=stdout, stderr=stderr)
    return stdout.getvalue(), stderr.getvalue()


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def path(self, name):
        return self.dir / name

    def save_small_model(self):
        path = self.path('model.archive')
        save_weights(small_model(), path)
        return path

    def write_dataset(self, count=3):
        weights = small_model()
        path = self.path('examples.jsonl')
        lines = []
        for tokens in fixture_prompts(count, length=6):
            target = greedy_argmax(forward(tokens, weights)[0][-1])
            lines.append(json.dumps({'tokens': tokens, 'target': target}))
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path

    def assertFails(self, returncode, *args):
        with self.assertRaises(CommandError) as caught:
            run(*args)
        self.assertEqual(caught.exception.returncode, returncode)
        return str(caught.exception)


class StagedOutputTests(CommandTestCase):

    def test_failed_block_leaves_nothing(self):
        target = self.path('out.bin')
        with self.assertRaises(RuntimeError):
            with staged_output(target) as staging:
                staging.write_bytes(b'partial')
                raise RuntimeError('boom')
        self.assertEqual(list(self.dir.iterdir()), [])

    def test_manifest_sits_beside_output(self):
        self.assertEqual(manifest_path(self.path('curves.csv')), self.path('curves.csv' + MANIFEST_SUFFIX))


class GenModelTests(CommandTestCase):

    def write_config(self, **overrides):
        path = self.path('config.json')
        path.write_text(json.dumps(fixture_config_data(**{**SMALL_CONFIG, **overrides})), encoding='utf-8')
        return path

    def test_same_flags_give_identical_archives(self):
        config = self.write_config()
        run('gen_model', '--config', config, '--seed', 42, '--out', self.path('a.archive'))
        run('gen_model', '--config', config, '--seed', 42, '--out', self.path('b.archive'))
        self.assertEqual(self.path('a.archive').read_bytes(), self.path('b.archive').read_bytes())

    def test_manifest_written(self):
        config = self.write_config()
        out = self.path('model.archive')
        run('gen_model', '--config', config, '--seed', 7, '--out', out)
        manifest = json.loads(manifest_path(out).read_text(encoding='utf-8'))
        _, weights = load_weights(out)
        self.assertEqual(manifest['command'], 'gen_model')
        self.assertEqual(manifest['model_fingerprint'], weights.fingerprint)
        self.assertEqual(manifest['flags']['seed'], 7)
        self.assertIn(str(config), manifest['inputs'])

    def test_unknown_flag_is_usage_error(self):
        config = self.write_config()
        message = self.assertFails(1, 'gen_model', '--config', config, '--seed', 1, '--out',
                                   self.path('m.archive'), '--colour')
        self.assertTrue(message.startswith('usage:'))
        self.assertFalse(self.path('m.archive').exists())

    def test_invalid_config_exits_2_without_output(self):
        config = self.write_config(d_model=15)
        message = self.assertFails(2, 'gen_model', '--config', config, '--seed', 1, '--out',
                                   self.path('m.archive'))
        self.assertTrue(message.startswith('config_error: '))
        self.assertEqual([p.name for p in self.dir.iterdir()], ['config.json'])

    def test_seed_must_fit_64_bits(self):
        self.assertFails(2, 'gen_model', '--config', self.write_config(), '--seed', 2 ** 64,
                         '--out', self.path('m.archive'))


class ForwardCommandTests(CommandTestCase):

    def test_trace_exported(self):
        model = self.save_small_model()
        out = self.path('trace.archive')
        stdout, _ = run('forward', '--model', model, '--tokens', '0,5,9', '--trace-out', out)
        trace = load_trace(out)
        self.assertEqual(trace.tokens, (0, 5, 9))
        summary = json.loads(stdout)
        self.assertEqual(summary['next_token'], greedy_argmax(forward([0, 5, 9], small_model())[0][-1]))
        self.assertTrue(manifest_path(out).exists())

    def test_text_with_vocab(self):
        model = self.save_small_model()
        out = self.path('trace.archive')
        run('forward', '--model', model, '--text', 'the a of', '--vocab', FIXTURE_DIR / 'vocab.txt',
            '--trace-out', out)
        self.assertEqual(load_trace(out).tokens, (0, 1, 2, 4))

    def test_needs_tokens_or_text(self):
        message = self.assertFails(2, 'forward', '--model', self.save_small_model(),
                                   '--trace-out', self.path('t.archive'))
        self.assertTrue(message.startswith('input_error: '))


class AttributeCommandTests(CommandTestCase):

    def test_token_report_sums_to_logit(self):
        weights = seed42_model('f64')
        model = self.path('seed42.archive')
        save_weights(weights, model)
        tokens = fixture_tokens()
        logits, _ = forward(tokens, weights)
        y = greedy_argmax(logits[-1])
        out = self.path('report.json')
        _, stderr = run('attribute', '--model', model, '--tokens', ','.join(map(str, tokens)), '--init', 'token',
                        '--rule', 'softmax', '--target', f'logit:{y}', '--out', out, '--selfcheck')
        report = parse_report(out.read_bytes())
        self.assertEqual(len(report.labels), 16)
        self.assertAlmostEqual(float(np.sum(report.scores)), float(logits[-1, y]), delta=1e-8)
        self.assertIn('selfcheck', stderr)

    def test_heads_heatmap(self):
        stdout, _ = run('attribute', '--model', self.save_small_model(), '--tokens', '0,3,4,5', '--init', 'heads',
                        '--layer', 1, '--target', 'logit:3', '--out', self.path('r.json'), '--heatmap')
        self.assertIn('L1.H0', stdout)
        self.assertIn('residual', stdout)

    def test_neuron_bins_as_csv(self):
        out = self.path('r.csv')
        run('attribute', '--model', self.save_small_model(), '--tokens', '0,3,4', '--init', 'neurons',
            '--layer', 0, '--bin-size', 16, '--rule', 'linear-norm', '--target', 'logit:5', '--out', out,
            '--format', 'csv')
        lines = out.read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[1].split(',')[3].startswith('L0.N0-'))

    def test_direction_target_from_probes(self):
        model = self.save_small_model()
        probe = LinearProbe(np.random.default_rng(2).normal(size=(2, 16)), np.zeros(2), (0, 1), layer=1)
        probes = self.path('probes.archive')
        save_probes([probe], probes)
        out = self.path('r.json')
        run('attribute', '--model', model, '--tokens', '0,3,4,5', '--target', f'direction:{probes}@1',
            '--out', out, '--selfcheck')
        report = parse_report(out.read_bytes())
        self.assertEqual(str(report.target), 'direction:probes@1')

    def test_subspace_init_with_projector(self):
        model = self.save_small_model()
        directions = self.path('directions.archive')
        write_archive(directions, [('directions', np.random.default_rng(4).normal(size=(2, 16)))],
                      {'kind': 'directions'})
        projector = self.path('proj.archive')
        run('project', '--directions', directions, '--out', projector)
        out = self.path('r.json')
        run('attribute', '--model', model, '--tokens', '0,3,4', '--init', 'subspace', '--layer', 1,
            '--projector', projector, '--target', 'logit:2', '--out', out)
        self.assertEqual(parse_report(out.read_bytes()).labels, ('parallel', 'orthogonal'))

    def test_target_errors(self):
        model = self.save_small_model()
        args = ['attribute', '--model', model, '--tokens', '0,3', '--out', self.path('r.json')]
        self.assertFails(1, *args, '--target', 'gradient:3')
        self.assertFails(2, *args, '--target', 'logit:x')
        self.assertFails(1, *args, '--target', 'logit:1', '--init', 'subspace')
        self.assertFalse(self.path('r.json').exists())

    def selfcheck_args(self):
        return ['--model', self.save_small_model(), '--tokens', '0,3,4,5', '--target', 'logit:3',
                '--out', self.path('r.json'), '--selfcheck']

    @mock.patch.dict('attribution.reports.COMPLETENESS_TOLERANCE', {np.dtype('<f8'): -1.0})
    def test_failed_selfcheck_exits_with_consistency_error(self):
        message = self.assertFails(3, 'attribute', *self.selfcheck_args())
        self.assertTrue(message.startswith('consistency: '))
        self.assertFalse(self.path('r.json').exists())
        self.assertFalse(manifest_path(self.path('r.json')).exists())

    @mock.patch.dict('attribution.reports.COMPLETENESS_TOLERANCE', {np.dtype('<f8'): -1.0})
    def test_failed_selfcheck_from_command_line(self):
        stdout, stderr = StringIO(), StringIO()
        command = AttributeCommand(stdout=stdout, stderr=stderr)
        args = [str(arg) for arg in self.selfcheck_args()]
        with self.assertRaises(SystemExit) as caught:
            command.run_from_argv(['manage.py', 'attribute', *args])
        self.assertEqual(caught.exception.code, 3)
        [line] = stderr.getvalue().splitlines()
        self.assertRegex(line, r'^consistency: Scores at position \d+ sum to ')
        self.assertFalse(self.path('r.json').exists())


class ProbeCommandTests(CommandTestCase):

    def test_probe_train_on_separable_points(self):
        features, labels = separable_points()
        path = self.path('features.jsonl')
        path.write_text(''.join(
            json.dumps({'features': row.tolist(), 'label': int(label), 'layer': 3}) + '\n'
            for row, label in zip(features, labels)
        ), encoding='utf-8')
        out = self.path('probes.archive')
        stdout, _ = run('probe_train', '--features', path, '--out', out)
        [probe] = load_probes(out)
        self.assertEqual(probe.layer, 3)
        self.assertGreaterEqual(probe.train_accuracy, 0.99)
        self.assertIn('layer 3', stdout)

    def test_missing_layer(self):
        path = self.path('features.jsonl')
        path.write_text('{"features": [1.0, 0.0], "label": 0, "layer": 2}\n'
                        '{"features": [0.0, 1.0], "label": 1, "layer": 2}\n', encoding='utf-8')
        self.assertFails(2, 'probe_train', '--features', path, '--out', self.path('p.archive'), '--layer', 5)

    def test_project_directions(self):
        directions = self.path('directions.archive')
        write_archive(directions, [('directions', np.random.default_rng(1).normal(size=(3, 16)))],
                      {'kind': 'directions'})
        out = self.path('proj.archive')
        stdout, _ = run('project', '--directions', directions, '--out', out)
        projection = load_projection(out)
        self.assertEqual(projection.rank, 3)
        self.assertAlmostEqual(float(np.trace(projection.matrix)), 3.0, places=10)
        self.assertIn('rank 3', stdout)


class EvaluateCommandTests(CommandTestCase):

    def test_faithfulness_curves(self):
        out = self.path('curves.csv')
        run('evaluate', 'faithfulness', '--model', self.save_small_model(), '--dataset', self.write_dataset(),
            '--methods', 'depass,uniform', '--grid', '0.5,1.0', '--out', out)
        lines = out.read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(lines), 1 + 2 * 2 * 2)
        self.assertIn('depass,recover_top,1.0,0.0,3', lines)

    def test_distributed_matches_in_process(self):
        model, dataset = self.save_small_model(), self.write_dataset()
        args = ['evaluate', 'faithfulness', '--model', model, '--dataset', dataset, '--methods', 'depass,random',
                '--grid', '0.3,0.6']
        run(*args, '--out', self.path('local.csv'))
        run(*args, '--out', self.path('remote.csv'), '--distributed')
        self.assertEqual(self.path('local.csv').read_bytes(), self.path('remote.csv').read_bytes())

    def test_component_masking(self):
        out = self.path('masking.csv')
        run('evaluate', 'components', '--model', self.save_small_model(), '--dataset', self.write_dataset(),
            '--methods', 'norm,depass', '--grid', '0,2', '--decomposition', 'heads', '--layer', 1, '--out', out)
        lines = out.read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(lines), 1 + 2 * 2 * 2)
        self.assertIn('norm,top_k,0,1.0,3', lines)

    def test_subspace_mask(self):
        probe = LinearProbe(np.zeros((2, 16)), [0.0, 10.0], (0, 1), layer=1)
        probes = self.path('probes.archive')
        save_probes([probe], probes)
        out = self.path('subspace.json')
        run('evaluate', 'subspace-mask', '--model', self.save_small_model(), '--dataset', self.write_dataset(),
            '--probes', probes, '--grid', '0.5', '--format', 'json', '--out', out)
        [curve] = json.loads(out.read_text(encoding='utf-8'))
        self.assertEqual(curve['grid'], ['original', 'flag_masked', 'depass_masked'])
        self.assertEqual(curve['means'][0], 1.0)

    def test_unknown_method(self):
        self.assertFails(1, 'evaluate', 'faithfulness', '--model', self.save_small_model(),
                         '--dataset', self.write_dataset(), '--methods', 'saliency', '--out', self.path('c.csv'))


class BenchCommandTests(CommandTestCase):

    def test_bench_neurons(self):
        out = self.path('bench.json')
        stdout, _ = run('bench', 'neurons', '--model', self.save_small_model(), '--layer', 1, '--prompts', 2,
                        '--length', 6, '--out', out)
        result = json.loads(out.read_text(encoding='utf-8'))
        self.assertEqual(result['d_mlp'], 32)
        self.assertEqual(result['num_examples'], 2)
        self.assertAlmostEqual(result['speedup'], result['t_ablation'] / result['t_depass'])
        self.assertIn('speedup', stdout)
