from pathlib import Path

import numpy as np

from attribution.reports import (
    REPORT_FORMATS, Target, build_report, check_completeness, export_report, render_heatmap_text
)
from attribution.scores import DEPASS, IMPORTANCE_METHODS
from cli.artifacts import write_output
from cli.base import DePassCommand, resolve_selfcheck
from depass.init import InitSpec, contiguous_bins, groups_from_word_spans
from depass.propagation import APPORTION_RULES
from depass.runner import run_decomposed
from depass.serializers import parse_groups_file
from depass_lab.exceptions import InputError, UsageError
from model_io.archive import read_archive
from model_io.serializers import read_json
from probes.linear import UNTRUTHFUL_LABEL, probes_from_archive
from probes.projection import load_projection
from transformer.forward import forward

INIT_CHOICES = ('token', 'heads', 'neurons', 'subspace')


def load_direction(path, layer):
    """The untruthful direction of the probe at ``layer``, or a single stored 'directions' row."""
    metadata, tensors = read_archive(path)
    if metadata.get('kind') == 'probes':
        probes = [p for p in probes_from_archive(metadata, tensors) if p.layer == layer]
        if not probes:
            raise InputError(f"No probe at layer {layer} in {path}.")
        return probes[0].direction(UNTRUTHFUL_LABEL)
    rows = np.atleast_2d(tensors['directions']) if 'directions' in tensors else np.empty((0, 0))
    if rows.shape[0] != 1:
        raise InputError(f"{path} must hold a probe at layer {layer} or exactly one 'directions' row.")
    return rows[0]


def parse_target(text):
    kind, _, rest = text.partition(':')
    if kind == 'logit':
        try:
            return Target.logit(int(rest))
        except ValueError:
            raise InputError(f"Logit target needs a token id, got {rest!r}.") from None
    if kind == 'direction':
        path, at, layer = rest.rpartition('@')
        if not at or not path:
            raise UsageError("Direction targets read direction:<file>@<layer>.")
        try:
            layer = int(layer)
        except ValueError:
            raise InputError(f"Direction layer must be an integer, got {layer!r}.") from None
        return Target.direction(layer, load_direction(path, layer), name=Path(path).stem)
    raise UsageError(f"Target must be logit:<id> or direction:<file>@<layer>, got {text!r}.")


class Command(DePassCommand):
    help = 'Decompose one prompt and score the components against a logit or a direction.'

    def add_arguments(self, parser):
        self.add_model_argument(parser)
        self.add_token_arguments(parser)
        parser.add_argument('--init', choices=INIT_CHOICES, default='token')
        parser.add_argument('--layer', type=int, default=0, help='Init layer for heads, neurons and subspace.')
        parser.add_argument('--groups', type=Path, help='Groups or word_spans JSON for token and neuron inits.')
        parser.add_argument('--bin-size', type=int, help='Contiguous neuron bin size.')
        parser.add_argument('--projector', type=Path, help='Projection archive for --init subspace.')
        parser.add_argument('--rule', choices=[r.replace('_', '-') for r in APPORTION_RULES] + list(APPORTION_RULES))
        parser.add_argument('--target', required=True, help='logit:<id> or direction:<file>@<layer>.')
        parser.add_argument('--method', choices=IMPORTANCE_METHODS, default=DEPASS)
        parser.add_argument('--position', default='last', help="'last', 'all' or a position index.")
        parser.add_argument('--out', type=Path, required=True)
        parser.add_argument('--format', choices=REPORT_FORMATS, default='json')
        parser.add_argument('--heatmap', action='store_true', help='Print a shaded text heatmap.')
        self.add_selfcheck_argument(parser)

    def init_spec(self, options, weights, num_positions):
        init, layer = options['init'], options['layer']
        groups = None
        if options.get('groups'):
            parsed = parse_groups_file(read_json(options['groups']))
            groups = parsed.get('groups')
            if 'word_spans' in parsed:
                if init != 'token':
                    raise UsageError("Word spans only group token positions.")
                groups = groups_from_word_spans(parsed['word_spans'], num_positions)
        if init == 'token':
            return InitSpec.token_wise(groups)
        if init == 'heads':
            return InitSpec.attention_heads(layer)
        if init == 'neurons':
            return InitSpec.mlp_neurons(layer, groups or contiguous_bins(weights.config.d_mlp, options['bin_size']))
        if not options.get('projector'):
            raise UsageError("--init subspace needs --projector.")
        return InitSpec.subspace(layer, load_projection(options['projector']))

    def handle(self, *args, **options):
        weights = self.load_model(options)
        tokens = self.resolve_tokens(options)
        target = parse_target(options['target'])
        _, trace = forward(tokens, weights)
        spec = self.init_spec(options, weights, trace.num_positions)
        selfcheck = resolve_selfcheck(options['selfcheck'], weights.config.dtype)

        snapshots = {target.layer} if target.kind == 'direction' else set()
        run = run_decomposed(trace, weights, spec, rule=options['rule'], snapshot_layers=snapshots,
                             check=selfcheck)
        report = build_report(run, trace, weights, target, options['method'], options['position'])
        if selfcheck and report.method == DEPASS:
            gap = check_completeness(report, trace)
            self.stderr.write(f"selfcheck: reconstruction {run.max_error:.3e}, completeness {gap:.3e}")

        write_output(options['out'], export_report(report, options['format']))
        inputs = [options['model'], options.get('vocab'), options.get('groups'), options.get('projector')]
        if target.kind == 'direction':
            inputs.append(options['target'].partition(':')[2].rpartition('@')[0])
        self.record_run(options['out'], options, weights, inputs=inputs)
        if options['heatmap']:
            self.stdout.write(render_heatmap_text(report, self.load_vocab(options)), ending='')
