"""
Celery tasks that score one example each, so an evaluation can fan out
over workers. Arguments and results stay JSON-serializable; weights are
loaded once per worker process from the archive path.
"""
import logging
from functools import lru_cache

from celery import group, shared_task

from depass_lab.exceptions import DePassError, EvaluationError, UsageError
from model_io.archive import load_weights
from transformer.forward import forward, greedy_argmax
from .dataset import Example
from .curves import curve_from_rows
from .faithfulness import aggregate_faithfulness, faithfulness_example
from .masking import MASKING_KINDS, MASKING_METHODS, component_masking_example, masking_spec
from .metrics import INTERVENTION_KINDS

logger = logging.getLogger(__name__)


@lru_cache(maxsize=4)
def cached_weights(model_path):
    _, weights = load_weights(model_path)
    return weights


def _example(data):
    return Example(int(data['index']), tuple(data['tokens']), int(data['target']), data.get('meta') or {})


def _check_examples(examples):
    if not examples:
        raise EvaluationError("Distributed evaluation needs at least one example.")


def _collect(job):
    """Results of a group in dispatch order."""
    return [result.get() for result in job.apply_async().results]


@shared_task
def faithfulness_example_task(model_path, example, methods, grid, kinds=INTERVENTION_KINDS,
                              keep_bos=True, rule=None, seed=0):
    """Δp lists for one example, or None when the model misses its target."""
    example = _example(example)
    try:
        return faithfulness_example(example, cached_weights(model_path), list(methods), list(grid),
                                    list(kinds), keep_bos, rule, seed)
    except DePassError as e:
        logger.error(f"Faithfulness failed for example {example.index}: {e}")
        raise


@shared_task
def component_masking_example_task(model_path, example, decomposition, layer, method, grid,
                                   kinds=MASKING_KINDS, groups=None, rule=None, seed=0):
    """Survival flags per masking kind for one example, or None when it is mispredicted."""
    example = _example(example)
    weights = cached_weights(model_path)
    try:
        logits, trace = forward(example.tokens, weights)
        if greedy_argmax(logits[-1]) != example.target:
            return None
        spec = masking_spec(decomposition, layer, groups).resolve(weights.config, 1)
        return component_masking_example(example, trace, weights, spec, method, list(kinds), list(grid),
                                         rule, seed)
    except DePassError as e:
        logger.error(f"Component masking failed for example {example.index}: {e}")
        raise


def run_faithfulness_distributed(model_path, examples, methods, grid, kinds=INTERVENTION_KINDS,
                                 keep_bos=True, rule=None, seed=0):
    """Same curves as run_faithfulness, one task per example; results come back in order."""
    _check_examples(examples)
    job = group(
        faithfulness_example_task.s(model_path, example.to_dict(), list(methods), list(grid),
                                    list(kinds), keep_bos, rule, seed)
        for example in examples
    )
    results = _collect(job)
    logger.info(f"Collected {len(results)} faithfulness results")
    return aggregate_faithfulness(examples, results, methods, grid, kinds)


def run_component_masking_distributed(model_path, examples, decomposition, layer, method, grid,
                                      kinds=MASKING_KINDS, groups=None, rule=None, seed=0):
    if method not in MASKING_METHODS:
        raise UsageError(f"Unknown masking method {method!r}; choose from {', '.join(MASKING_METHODS)}.")
    _check_examples(examples)
    job = group(
        component_masking_example_task.s(model_path, example.to_dict(), decomposition, layer, method,
                                         list(grid), list(kinds), groups, rule, seed)
        for example in examples
    )
    results = _collect(job)
    scored = [(example, result) for example, result in zip(examples, results) if result is not None]
    if not scored:
        raise EvaluationError("No example is predicted correctly; nothing to evaluate.")
    example_ids = [example.index for example, _ in scored]
    grid = [int(k) for k in grid]
    return [
        curve_from_rows(method, kind, grid, [result[kind] for _, result in scored], example_ids)
        for kind in kinds
    ]
