"""
Token-level faithfulness: remove tokens by attribution score and measure
how far the target probability moves (patch_top for comprehensiveness,
recover_top for sufficiency).
"""
import logging

from tqdm import tqdm

from attribution.scores import DEPASS, logit_attribution, target_direction
from depass.init import InitSpec
from depass.runner import run_decomposed
from depass_lab.exceptions import EvaluationError
from transformer.forward import forward, greedy_argmax, next_token_distribution
from .baselines import BASELINE_METHODS, baseline_scores
from .curves import curve_from_rows
from .metrics import INTERVENTION_KINDS, InterventionSpec, apply_token_intervention, delta_p

logger = logging.getLogger(__name__)

FAITHFULNESS_METHODS = (DEPASS,) + BASELINE_METHODS


def token_scores(trace, weights, method, target, rule=None, seed=0):
    """(N,) attribution of the last-position target logit to each input token."""
    if method == DEPASS:
        run = run_decomposed(trace, weights, InitSpec.token_wise(), rule=rule)
        return logit_attribution(run.final_normed, target_direction(weights, target))[-1]
    return baseline_scores(trace, method, seed=seed)


def _target_probability(tokens, weights, target):
    logits, _ = forward(tokens, weights)
    return next_token_distribution(logits[-1]).probability(target)


def faithfulness_example(example, weights, methods, grid, kinds=INTERVENTION_KINDS, keep_bos=True,
                         rule=None, seed=0):
    """
    Δp per method, kind and grid point for one example, or None when the
    model does not predict the example's target.
    """
    logits, trace = forward(example.tokens, weights)
    if greedy_argmax(logits[-1]) != example.target:
        return None
    p_orig = next_token_distribution(logits[-1]).probability(example.target)
    probabilities = {example.tokens: p_orig}

    result = {}
    for method in methods:
        scores = token_scores(trace, weights, method, example.target, rule, seed + example.index)
        result[method] = {}
        for kind in kinds:
            values = []
            for fraction in grid:
                tokens = apply_token_intervention(example.tokens, scores,
                                                  InterventionSpec(kind, fraction, keep_bos))
                if tokens not in probabilities:
                    probabilities[tokens] = _target_probability(tokens, weights, example.target)
                values.append(delta_p(p_orig, probabilities[tokens]))
            result[method][kind] = values
    return result


def aggregate_faithfulness(examples, results, methods, grid, kinds=INTERVENTION_KINDS):
    """Curves from per-example results aligned with ``examples``; None entries were filtered."""
    scored = [(example, result) for example, result in zip(examples, results) if result is not None]
    if not scored:
        raise EvaluationError("No example is predicted correctly; nothing to evaluate.")
    example_ids = [example.index for example, _ in scored]
    grid = [float(k) for k in grid]
    return [
        curve_from_rows(method, kind, grid, [result[method][kind] for _, result in scored], example_ids)
        for method in methods
        for kind in kinds
    ]


def run_faithfulness(examples, weights, methods, grid, kinds=INTERVENTION_KINDS, keep_bos=True,
                     rule=None, seed=0, progress=False):
    """One curve per (method, kind), averaged over correctly predicted examples."""
    results = [
        faithfulness_example(example, weights, methods, grid, kinds, keep_bos, rule, seed)
        for example in tqdm(examples, desc='faithfulness', disable=not progress)
    ]
    curves = aggregate_faithfulness(examples, results, methods, grid, kinds)
    logger.info(f"Faithfulness over {curves[0].num_examples} of {len(examples)} examples "
                f"for {', '.join(methods)}")
    return curves
