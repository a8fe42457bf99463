import logging
from pathlib import Path

from django.conf import settings

from cli.artifacts import write_output
from cli.base import DePassCommand, parse_float_list, parse_int_list, parse_name_list
from depass.init import contiguous_bins
from depass.serializers import parse_groups_file
from depass_lab.exceptions import UsageError
from evaluation.curves import CURVE_FORMATS, export_curves
from evaluation.dataset import load_dataset
from evaluation.faithfulness import FAITHFULNESS_METHODS, run_faithfulness
from evaluation.masking import MASKING_KINDS, masking_spec, run_component_masking
from evaluation.metrics import INTERVENTION_KINDS
from evaluation.subspace import BUDGET_BASES, BUDGET_OF_ALL, run_subspace_masking
from evaluation.tasks import run_component_masking_distributed, run_faithfulness_distributed
from model_io.serializers import read_json
from probes.linear import load_probes

logger = logging.getLogger(__name__)

FAITHFULNESS = 'faithfulness'
COMPONENTS = 'components'
SUBSPACE_MASK = 'subspace-mask'

DEFAULT_GRIDS = {
    FAITHFULNESS: '0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0',
    COMPONENTS: '0,1,2,3,4',
    SUBSPACE_MASK: '0.1',
}


class Command(DePassCommand):
    help = 'Run a faithfulness, component-masking or subspace-masking protocol over a dataset.'

    def add_arguments(self, parser):
        parser.add_argument('protocol', choices=(FAITHFULNESS, COMPONENTS, SUBSPACE_MASK))
        self.add_model_argument(parser)
        parser.add_argument('--dataset', type=Path, required=True, help='Examples JSONL.')
        parser.add_argument('--vocab', type=Path, help='Vocabulary for text examples.')
        parser.add_argument('--methods', default='depass', help='Comma-separated scoring methods.')
        parser.add_argument('--grid', help='K fractions, k counts, or masking budgets (comma-separated).')
        parser.add_argument('--kinds', help='Comma-separated protocol kinds.')
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--format', choices=CURVE_FORMATS, default='csv')
        parser.add_argument('--rule')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--no-keep-bos', dest='keep_bos', action='store_false',
                            help='Let token interventions remove BOS.')
        parser.add_argument('--decomposition', choices=('heads', 'neurons'), default='heads')
        parser.add_argument('--layer', type=int, default=0)
        parser.add_argument('--groups', type=Path, help='Neuron groups JSON for --decomposition neurons.')
        parser.add_argument('--bin-size', type=int)
        parser.add_argument('--probes', type=Path, help='Probes archive for subspace-mask.')
        parser.add_argument('--basis', choices=BUDGET_BASES, default=BUDGET_OF_ALL)
        parser.add_argument('--min-layer', type=int)
        parser.add_argument('--distributed', action='store_true', help='Fan examples out as Celery tasks.')
        parser.add_argument('--progress', action='store_true')

    def handle(self, *args, **options):
        protocol = options['protocol']
        weights = self.load_model(options)
        examples = load_dataset(options['dataset'], self.load_vocab(options))
        grid = options['grid'] or DEFAULT_GRIDS[protocol]
        methods = parse_name_list(options['methods'])
        if options['distributed']:
            if protocol == SUBSPACE_MASK:
                raise UsageError("subspace-mask runs in-process only.")
            logger.info(f"Dispatching {len(examples)} examples as tasks ({settings.DEPASS_EVAL_WORKERS} workers)")

        if protocol == FAITHFULNESS:
            curves = self.faithfulness(options, weights, examples, methods, parse_float_list(grid, 'fraction'))
        elif protocol == COMPONENTS:
            curves = self.components(options, weights, examples, methods, parse_int_list(grid, 'count'))
        else:
            curves = self.subspace(options, weights, examples, parse_float_list(grid, 'budget'))

        write_output(options['out'], export_curves(curves, options['format']))
        inputs = [options['model'], options['dataset'], options.get('vocab'), options.get('groups'),
                  options.get('probes')]
        self.record_run(options['out'], options, weights, inputs=inputs)
        for curve in curves:
            means = ' '.join(f'{mean:.4f}' for mean in curve.means)
            self.stdout.write(f"{curve.method} {curve.kind} (n={curve.num_examples}): {means}")

    def kinds(self, options, default):
        return parse_name_list(options['kinds']) if options['kinds'] else list(default)

    def faithfulness(self, options, weights, examples, methods, grid):
        unknown = sorted(set(methods) - set(FAITHFULNESS_METHODS))
        if unknown:
            choices = ', '.join(FAITHFULNESS_METHODS)
            raise UsageError(f"Unknown faithfulness methods {unknown}; choose from {choices}.")
        kinds = self.kinds(options, INTERVENTION_KINDS)
        if options['distributed']:
            return run_faithfulness_distributed(str(options['model']), examples, methods, grid, kinds,
                                                options['keep_bos'], options['rule'], options['seed'])
        return run_faithfulness(examples, weights, methods, grid, kinds, options['keep_bos'], options['rule'],
                                options['seed'], progress=options['progress'])

    def components(self, options, weights, examples, methods, grid):
        kinds = self.kinds(options, MASKING_KINDS)
        groups = None
        if options['decomposition'] == 'neurons':
            if options.get('groups'):
                groups = parse_groups_file(read_json(options['groups'])).get('groups')
                if groups is None:
                    raise UsageError("Neuron groups take an explicit 'groups' list.")
            else:
                groups = contiguous_bins(weights.config.d_mlp, options['bin_size'])
        curves = []
        for method in methods:
            if options['distributed']:
                curves.extend(run_component_masking_distributed(
                    str(options['model']), examples, options['decomposition'], options['layer'], method, grid,
                    kinds, [list(group) for group in groups] if groups else None, options['rule'],
                    options['seed'],
                ))
            else:
                spec = masking_spec(options['decomposition'], options['layer'], groups)
                curves.extend(run_component_masking(examples, weights, spec, method, grid, kinds,
                                                    options['rule'], options['seed'], options['progress']))
        return curves

    def subspace(self, options, weights, examples, budgets):
        if not options.get('probes'):
            raise UsageError("subspace-mask needs --probes.")
        probes = load_probes(options['probes'])
        return [
            run_subspace_masking(examples, weights, probes, budget, options['basis'], options['min_layer'],
                                 rule=options['rule'], progress=options['progress'])
            for budget in budgets
        ]
