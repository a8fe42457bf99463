from pathlib import Path

import numpy as np
from rest_framework.renderers import JSONRenderer

from cli.artifacts import write_output
from cli.base import DePassCommand
from evaluation.bench import bench_depass_vs_ablation
from evaluation.dataset import greedy_targets, load_dataset
from model_io.vocab import BOS_ID


class Command(DePassCommand):
    help = 'Time neuron attribution for one layer: DePass against per-neuron ablation.'

    def add_arguments(self, parser):
        parser.add_argument('unit', choices=('neurons',))
        self.add_model_argument(parser)
        parser.add_argument('--layer', type=int, required=True)
        parser.add_argument('--dataset', type=Path, help='Examples JSONL; random prompts when omitted.')
        parser.add_argument('--prompts', type=int, default=4, help='Random prompts to draw without a dataset.')
        parser.add_argument('--length', type=int, default=16)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--rule')
        parser.add_argument('--out', type=Path, required=True)

    def handle(self, *args, **options):
        weights = self.load_model(options)
        if options['dataset']:
            examples = load_dataset(options['dataset'])
        else:
            rng = np.random.default_rng(options['seed'])
            vocab_size = weights.config.vocab_size
            prompts = [
                [BOS_ID] + rng.integers(1, vocab_size, size=options['length'] - 1).tolist()
                for _ in range(options['prompts'])
            ]
            examples = greedy_targets(prompts, weights)

        result = bench_depass_vs_ablation(examples, weights, options['layer'], options['rule'])
        write_output(options['out'], JSONRenderer().render(result.to_dict(), renderer_context={'indent': 2}))
        self.record_run(options['out'], options, weights, inputs=[options['model'], options.get('dataset')])
        self.stdout.write(f"t_depass {result.t_depass:.4f}s  t_ablation {result.t_ablation:.4f}s  "
                          f"speedup {result.speedup:.1f}x")
