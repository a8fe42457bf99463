import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from depass_lab.exceptions import EXIT_USAGE, DePassError, InputError
from model_io.archive import load_weights
from model_io.vocab import Vocab, tokenize
from .artifacts import RunManifest, file_digest, write_manifest

logger = logging.getLogger(__name__)

# Options every Django command carries; they stay out of run manifests.
DJANGO_OPTIONS = frozenset({
    'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color', 'force_color', 'skip_checks',
})


def _usage_error(parser):
    def error(message):
        if parser.called_from_command_line:
            parser.exit(EXIT_USAGE, f'usage: {message}\n')
        raise CommandError(f'usage: {message}', returncode=EXIT_USAGE)
    return error


def parse_int_list(text, what='value'):
    try:
        return [int(item) for item in text.replace(',', ' ').split()]
    except ValueError:
        raise InputError(f"Expected a list of integer {what}s, got {text!r}.") from None


def parse_float_list(text, what='value'):
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise InputError(f"Expected a comma-separated list of {what}s, got {text!r}.") from None


def parse_name_list(text):
    return [item.strip() for item in text.split(',') if item.strip()]


def resolve_selfcheck(flag, dtype):
    """Explicit flag, else the DEPASS_SELFCHECK setting, else on for f64 only."""
    if flag is None:
        flag = settings.DEPASS_SELFCHECK
    if flag is None:
        flag = np.dtype(dtype) == np.float64
    return bool(flag)


class DePassCommand(BaseCommand):
    """
    Base for the toolkit's commands. A DePassError ends the command with a
    single ``<code>: <message>`` line and the error's exit code; bad
    arguments exit with 1.
    """
    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = _usage_error(parser)
        return parser

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def execute(self, *args, **options):
        self.started = time.perf_counter()
        try:
            return super().execute(*args, **options)
        except DePassError as exc:
            message = f"{exc.code}: {str(exc).replace(chr(10), ' ')}"
            logger.debug(f"{self.command_name} failed with {exc.code}")
            if getattr(self, '_called_from_command_line', False):
                self.stderr.write(message)
                sys.exit(exc.exit_code)
            raise CommandError(message, returncode=exc.exit_code) from exc

    def add_model_argument(self, parser):
        parser.add_argument('--model', type=Path, required=True, help='Weights archive.')

    def add_token_arguments(self, parser):
        parser.add_argument('--tokens', help='Token ids, comma or space separated.')
        parser.add_argument('--text', help='Whitespace-tokenized text; needs --vocab.')
        parser.add_argument('--vocab', type=Path, help='Vocabulary file, one token per line.')

    def add_selfcheck_argument(self, parser):
        parser.add_argument('--selfcheck', action=argparse.BooleanOptionalAction, default=None,
                            help='Assert reconstruction and completeness while running.')

    def load_model(self, options):
        _, weights = load_weights(options['model'])
        return weights

    def load_vocab(self, options):
        return Vocab.load(options['vocab']) if options.get('vocab') else None

    def resolve_tokens(self, options):
        if bool(options.get('tokens')) == bool(options.get('text')):
            raise InputError("Give exactly one of --tokens or --text.")
        if options.get('tokens'):
            return parse_int_list(options['tokens'], 'token id')
        vocab = self.load_vocab(options)
        if vocab is None:
            raise InputError("--text needs --vocab.")
        return tokenize(options['text'], vocab)

    def record_run(self, output, options, weights=None, inputs=()):
        """Write the manifest for ``output`` from the parsed options."""
        flags = {
            name: str(value) if isinstance(value, Path) else value
            for name, value in sorted(options.items())
            if name not in DJANGO_OPTIONS
        }
        manifest = RunManifest(
            command=self.command_name,
            flags=flags,
            model_fingerprint=weights.fingerprint if weights is not None else None,
            inputs={str(path): file_digest(path) for path in inputs if path},
            wall_time=time.perf_counter() - self.started,
        )
        write_manifest(manifest, output)
