from pathlib import Path

from cli.artifacts import write_output
from cli.base import DePassCommand
from depass_lab.exceptions import InputError
from model_io.archive import weights_archive_bytes
from model_io.serializers import parse_model_config, read_json
from model_io.weights import generate_random_model


class Command(DePassCommand):
    help = 'Draw a random model from a config file and a splitmix64 seed.'

    def add_arguments(self, parser):
        parser.add_argument('--config', type=Path, required=True, help='Model config JSON.')
        parser.add_argument('--seed', type=int, required=True, help='Unsigned 64-bit seed.')
        parser.add_argument('--out', type=Path, required=True, help='Weights archive to write.')

    def handle(self, *args, **options):
        if not 0 <= options['seed'] < 2 ** 64:
            raise InputError(f"Seed must be an unsigned 64-bit integer, got {options['seed']}.")
        config = parse_model_config(read_json(options['config']))
        weights = generate_random_model(config, options['seed'])
        write_output(options['out'], weights_archive_bytes(weights))
        self.record_run(options['out'], options, weights, inputs=[options['config']])
        self.stdout.write(f"{weights.fingerprint} {options['out']}")
