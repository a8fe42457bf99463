import logging
from dataclasses import dataclass, field

from depass_lab.exceptions import EvaluationError
from model_io.serializers import read_jsonl, validate_records
from transformer.forward import forward, greedy_argmax
from .serializers import ExampleSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example:
    index: int
    tokens: tuple
    target: int
    meta: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {'index': self.index, 'tokens': list(self.tokens), 'target': self.target, 'meta': self.meta}


def make_examples(records):
    """Examples from ``(tokens, target)`` pairs or validated dataset records."""
    examples = []
    for index, record in enumerate(records):
        if isinstance(record, dict):
            tokens, target, meta = record['tokens'], record['target'], record.get('meta') or {}
        else:
            (tokens, target), meta = record, {}
        examples.append(Example(index, tuple(int(t) for t in tokens), int(target), dict(meta)))
    return examples


def load_dataset(path, vocab=None):
    records = validate_records(read_jsonl(path), ExampleSerializer, 'example', {'vocab': vocab})
    return make_examples(records)


def filter_correct(examples, weights):
    """
    Examples whose greedy prediction is the target, each with its logits
    and trace. An empty result raises EvaluationError.
    """
    kept = []
    for example in examples:
        logits, trace = forward(example.tokens, weights)
        if greedy_argmax(logits[-1]) == example.target:
            kept.append((example, logits, trace))
    logger.info(f"{len(kept)} of {len(examples)} examples predicted correctly")
    if not kept:
        raise EvaluationError("No example is predicted correctly; nothing to evaluate.")
    return kept


def greedy_targets(prompts, weights):
    """Label prompts with the model's own prediction, so every example passes the filter."""
    return make_examples(
        (tokens, greedy_argmax(forward(tokens, weights)[0][-1])) for tokens in prompts
    )
