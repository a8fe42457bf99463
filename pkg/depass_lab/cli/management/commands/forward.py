from pathlib import Path

from rest_framework.renderers import JSONRenderer

from cli.artifacts import staged_output
from cli.base import DePassCommand
from transformer.forward import forward, greedy_argmax, next_token_distribution
from transformer.trace import export_trace


class Command(DePassCommand):
    help = 'Run the standard forward pass and export the full trace.'

    def add_arguments(self, parser):
        self.add_model_argument(parser)
        self.add_token_arguments(parser)
        parser.add_argument('--trace-out', type=Path, required=True, help='Trace archive to write.')

    def handle(self, *args, **options):
        weights = self.load_model(options)
        tokens = self.resolve_tokens(options)
        logits, trace = forward(tokens, weights)
        with staged_output(options['trace_out']) as staging:
            export_trace(trace, staging)
        self.record_run(options['trace_out'], options, weights, inputs=[options['model'], options.get('vocab')])

        next_token = greedy_argmax(logits[-1])
        summary = {
            'tokens': list(trace.tokens),
            'next_token': next_token,
            'probability': next_token_distribution(logits[-1]).probability(next_token),
            'model_fingerprint': weights.fingerprint,
        }
        self.stdout.write(JSONRenderer().render(summary).decode('utf-8'))
