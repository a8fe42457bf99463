from pathlib import Path

from cli.artifacts import staged_output
from cli.base import DePassCommand
from depass_lab.exceptions import InputError
from probes.linear import save_probes, train_probe
from probes.serializers import load_feature_dataset


class Command(DePassCommand):
    help = 'Train one linear probe per layer found in a features JSONL file.'

    def add_arguments(self, parser):
        parser.add_argument('--features', type=Path, required=True, help='Features JSONL.')
        parser.add_argument('--out', type=Path, required=True, help='Probes archive to write.')
        parser.add_argument('--layer', type=int, help='Only train the probe for this layer.')
        parser.add_argument('--lr', type=float)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--l2', type=float)
        parser.add_argument('--seed', type=int, default=0)

    def handle(self, *args, **options):
        dataset = load_feature_dataset(options['features'])
        layers = sorted(dataset, key=lambda layer: -1 if layer is None else layer)
        if options['layer'] is not None:
            layers = [layer for layer in layers if layer == options['layer']]
        if not layers:
            raise InputError(f"No features for layer {options['layer']} in {options['features']}.")

        probes = []
        for layer in layers:
            features, labels = dataset[layer]
            probe = train_probe(features, labels, lr=options['lr'], steps=options['steps'],
                                l2=options['l2'], seed=options['seed'], layer=layer)
            probes.append(probe)
            self.stdout.write(f"layer {layer}: train accuracy {probe.train_accuracy:.4f}, "
                              f"loss {probe.final_loss:.6f}")

        with staged_output(options['out']) as staging:
            save_probes(probes, staging)
        self.record_run(options['out'], options, inputs=[options['features']])
