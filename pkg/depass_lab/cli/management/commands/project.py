from pathlib import Path

from cli.artifacts import staged_output
from cli.base import DePassCommand
from probes.projection import load_directions, projection_from_directions, save_projection


class Command(DePassCommand):
    help = 'Build the orthogonal projector onto the span of stored directions.'

    def add_arguments(self, parser):
        parser.add_argument('--directions', type=Path, required=True,
                            help="Probes archive or archive with a 'directions' tensor.")
        parser.add_argument('--layer', type=int, help='Use only the probes trained at this layer.')
        parser.add_argument('--out', type=Path, required=True, help='Projection archive to write.')

    def handle(self, *args, **options):
        directions = load_directions(options['directions'], options['layer'])
        projection = projection_from_directions(directions)
        with staged_output(options['out']) as staging:
            save_projection(projection, staging, source=str(options['directions']))
        self.record_run(options['out'], options, inputs=[options['directions']])
        self.stdout.write(f"rank {projection.rank} of {directions.shape[0]} directions, width {projection.width}")
