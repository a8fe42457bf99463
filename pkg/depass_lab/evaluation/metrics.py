"""Δp and token-level interventions (removal and reassembly)."""
import math
from dataclasses import dataclass

import numpy as np

from depass_lab.exceptions import InputError, InterventionError, UndefinedMetricError

PATCH_TOP = 'patch_top'
RECOVER_TOP = 'recover_top'
INTERVENTION_KINDS = (PATCH_TOP, RECOVER_TOP)


def delta_p(p_orig, p_pert):
    """|p_orig - p_pert| / p_orig."""
    p_orig = float(p_orig)
    if not p_orig > 0:
        raise UndefinedMetricError(f"Δp needs a positive original probability, got {p_orig}.")
    return abs(p_orig - float(p_pert)) / p_orig


def budget_count(fraction, size):
    """ceil(fraction * size), rounded to 9 places first so 0.3 * 10 is 3."""
    return math.ceil(round(fraction * size, 9))


def top_order(scores, positions):
    """``positions`` sorted by descending score; the lower position wins ties."""
    positions = np.asarray(positions, dtype=np.int64)
    values = np.asarray(scores, dtype=np.float64)[positions]
    return positions[np.lexsort((positions, -values))]


@dataclass(frozen=True)
class InterventionSpec:
    kind: str
    fraction: float
    keep_bos: bool = True

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            choices = ', '.join(INTERVENTION_KINDS)
            raise InputError(f"Unknown intervention {self.kind!r}; choose from {choices}.")
        if not 0 < self.fraction <= 1:
            raise InputError(f"Intervention fraction must lie in (0, 1], got {self.fraction}.")


def kept_positions(scores, spec, length=None):
    """Positions that survive the intervention, in prompt order."""
    scores = np.asarray(scores, dtype=np.float64)
    length = scores.size if length is None else length
    if scores.shape != (length,):
        raise InputError(f"Got {scores.size} scores for {length} tokens.")
    start = 1 if spec.keep_bos else 0
    eligible = np.arange(start, length)
    top = top_order(scores, eligible)[:budget_count(spec.fraction, eligible.size)]

    if spec.kind == PATCH_TOP:
        kept = np.setdiff1d(np.arange(length), top)
    else:
        kept = np.union1d(np.arange(start), top)
    if kept.size == 0:
        raise InterventionError("Intervention removed every token.")
    return kept


def apply_token_intervention(tokens, scores, spec):
    """Remove tokens by score and reassemble the survivors in order."""
    tokens = tuple(int(t) for t in tokens)
    return tuple(tokens[i] for i in kept_positions(scores, spec, len(tokens)))
