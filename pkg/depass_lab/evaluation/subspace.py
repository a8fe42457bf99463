"""
Probe-guided token masking: flag tokens whose states look untruthful to the
probes, then remove either the flagged tokens themselves or the input
tokens that DePass says build the untruthful activation.
"""
import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from attribution.scores import direction_attribution, snapshot_at
from depass.init import InitSpec
from depass.runner import run_decomposed
from depass_lab.exceptions import EvaluationError, InputError
from probes.linear import UNTRUTHFUL_LABEL, flag_tokens, mean_untruthful_probability, probe_band
from transformer.forward import forward, greedy_argmax
from .curves import curve_from_rows
from .metrics import budget_count, top_order

logger = logging.getLogger(__name__)

BUDGET_OF_ALL = 'all'
BUDGET_OF_FLAGGED = 'flagged'
BUDGET_BASES = (BUDGET_OF_ALL, BUDGET_OF_FLAGGED)

SETTINGS = ('original', 'flag_masked', 'depass_masked')


@dataclass(frozen=True)
class SubspaceMaskResult:
    tokens: tuple
    flagged: tuple
    flag_removed: tuple
    depass_removed: tuple

    def _without(self, removed):
        removed = set(removed)
        return tuple(t for i, t in enumerate(self.tokens) if i not in removed)

    @property
    def flag_masked(self):
        return self._without(self.flag_removed)

    @property
    def depass_masked(self):
        return self._without(self.depass_removed)


def removal_budget(num_tokens, num_flagged, budget, basis=BUDGET_OF_ALL):
    """
    Tokens to remove: a fraction of all non-BOS tokens (or of the flagged
    ones), capped at the number flagged.
    """
    if not 0 < budget <= 1:
        raise InputError(f"Masking budget must lie in (0, 1], got {budget}.")
    if basis not in BUDGET_BASES:
        raise InputError(f"Unknown budget basis {basis!r}; choose from {', '.join(BUDGET_BASES)}.")
    size = num_tokens - 1 if basis == BUDGET_OF_ALL else num_flagged
    return min(budget_count(budget, size), num_flagged)


def flagged_contributions(run, band, flagged, label=UNTRUTHFUL_LABEL):
    """
    Token-wise contributions to the untruthful direction, averaged over the
    probe band and then over the flagged positions. ``run`` must be a
    token-wise run with a snapshot at every band layer.
    """
    per_layer = [
        direction_attribution(snapshot_at(run, probe.layer), probe.direction(label))[list(flagged)]
        for probe in band
    ]
    return np.mean(per_layer, axis=0).mean(axis=0)


def depass_subspace_masking(trace, weights, probes, budget, basis=BUDGET_OF_ALL, min_layer=None,
                            label=UNTRUTHFUL_LABEL, rule=None):
    """
    Flag tokens with the probes, then pick as many tokens to remove by
    direct flagging and by DePass contribution. BOS is never flagged.
    """
    tokens = tuple(trace.tokens)
    band = probe_band(probes, trace.num_layers, min_layer)
    means = mean_untruthful_probability(trace, band, min_layer, label)
    flags = flag_tokens(means)
    flags[0] = False
    flagged = np.flatnonzero(flags)
    if flagged.size == 0:
        logger.info("No token flagged; prompt left unchanged")
        return SubspaceMaskResult(tokens, (), (), ())

    count = removal_budget(len(tokens), flagged.size, budget, basis)
    flag_removed = top_order(means, flagged)[:count]

    run = run_decomposed(trace, weights, InitSpec.token_wise(), rule=rule,
                         snapshot_layers={probe.layer for probe in band})
    contributions = flagged_contributions(run, band, flagged, label)
    depass_removed = top_order(contributions, np.arange(1, len(tokens)))[:count]
    return SubspaceMaskResult(
        tokens,
        tuple(int(i) for i in flagged),
        tuple(sorted(int(i) for i in flag_removed)),
        tuple(sorted(int(i) for i in depass_removed)),
    )


def run_subspace_masking(examples, weights, probes, budget, basis=BUDGET_OF_ALL, min_layer=None,
                         label=UNTRUTHFUL_LABEL, rule=None, progress=False):
    """Accuracy of the greedy prediction on original, flag-masked and DePass-masked prompts."""
    if not examples:
        raise EvaluationError("Subspace masking needs at least one example.")
    rows = []
    for example in tqdm(examples, desc='subspace masking', disable=not progress):
        _, trace = forward(example.tokens, weights)
        result = depass_subspace_masking(trace, weights, probes, budget, basis, min_layer, label, rule)
        rows.append([
            greedy_argmax(forward(tokens, weights)[0][-1]) == example.target
            for tokens in (result.tokens, result.flag_masked, result.depass_masked)
        ])
    curve = curve_from_rows('subspace_mask', f'budget={budget}', list(SETTINGS), rows,
                            [example.index for example in examples])
    logger.info(f"Subspace masking over {len(examples)} examples: "
                + ', '.join(f'{s}={m:.3f}' for s, m in zip(SETTINGS, curve.means)))
    return curve
