"""
Component masking: zero attention heads or MLP neuron groups chosen by an
importance score and check whether the greedy prediction survives.
"""
import logging
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from attribution.scores import COEF, DEPASS, DEPASS_ABS, NORM, component_importance, target_direction
from depass.init import ATTENTION_HEADS, MLP_NEURONS, InitSpec
from depass.runner import run_decomposed
from depass_lab.exceptions import EvaluationError, InputError, UsageError
from transformer.forward import AblationMask, forward, predict_next
from .baselines import RANDOM, UNIFORM
from .curves import curve_from_rows
from .dataset import filter_correct
from .metrics import top_order

logger = logging.getLogger(__name__)

TOP_K = 'top_k'
BOTTOM_K = 'bottom_k'
MASKING_KINDS = (TOP_K, BOTTOM_K)
MASKING_METHODS = (NORM, COEF, DEPASS, DEPASS_ABS, RANDOM, UNIFORM)

DECOMPOSITION_ALIASES = {'heads': ATTENTION_HEADS, 'neurons': MLP_NEURONS}


def masking_spec(decomposition, layer, groups=None):
    """InitSpec for an ablatable decomposition; 'heads' and 'neurons' are accepted as aliases."""
    kind = DECOMPOSITION_ALIASES.get(decomposition, decomposition)
    if kind == ATTENTION_HEADS:
        return InitSpec.attention_heads(layer)
    if kind == MLP_NEURONS:
        return InitSpec.mlp_neurons(layer, groups)
    raise UsageError(f"Only heads and neurons can be masked, not {decomposition!r}.")


@dataclass(frozen=True, eq=False)
class MaskedModel:
    """Forward runner with some heads or neurons zeroed."""
    weights: object
    mask: AblationMask

    def forward(self, tokens):
        return forward(tokens, self.weights, mask=self.mask)

    def predict(self, tokens):
        return predict_next(tokens, self.weights, mask=self.mask)


def ablation_mask(config, spec, components):
    spec = spec.resolve(config, 1)
    if spec.kind == ATTENTION_HEADS:
        ablatable = config.num_heads
    elif spec.kind == MLP_NEURONS:
        ablatable = len(spec.groups)
    else:
        raise UsageError(f"Only heads and neurons can be masked, not {spec.kind}.")

    components = sorted({int(c) for c in components})
    if ablatable in components:
        raise UsageError("The residual component cannot be masked.")
    bad = [c for c in components if not 0 <= c < ablatable]
    if bad:
        raise InputError(f"Component indices {bad} outside 0..{ablatable - 1}.")

    if spec.kind == ATTENTION_HEADS:
        return AblationMask(heads=frozenset((spec.layer, h) for h in components))
    return AblationMask(neurons=frozenset(
        (spec.layer, neuron) for c in components for neuron in spec.groups[c]
    ))


def mask_components(weights, spec, components):
    return MaskedModel(weights, ablation_mask(weights.config, spec, components))


def importance_row(run, trace, weights, method, target, seed=0):
    """Scores of the ablatable components (residual dropped) at the last position."""
    m = len(run.labels) - 1
    if method == RANDOM:
        return np.random.default_rng(seed).random(m)
    if method == UNIFORM:
        return np.ones(m)
    w_y = target_direction(weights, target) if method in (DEPASS, DEPASS_ABS) else None
    return np.asarray(component_importance(run, method, w_y, trace)[-1][:m], dtype=np.float64)


def select_components(scores, k, kind):
    order = top_order(scores, np.arange(len(scores)))
    if kind == TOP_K:
        return order[:k]
    if kind == BOTTOM_K:
        return order[::-1][:k]
    raise UsageError(f"Unknown masking kind {kind!r}; choose from {', '.join(MASKING_KINDS)}.")


def clamp_grid(grid, ablatable):
    if any(int(k) < 0 for k in grid):
        raise InputError(f"Masking counts must be non-negative, got {list(grid)}.")
    clamped = [min(int(k), ablatable) for k in grid]
    if clamped != [int(k) for k in grid]:
        logger.warning(f"Clamped masking counts {list(grid)} to {ablatable} ablatable components")
    return clamped


def component_masking_example(example, trace, weights, spec, method, kinds, grid, rule=None, seed=0):
    """{kind: [prediction survives masking k components]} for one correctly predicted example."""
    run = run_decomposed(trace, weights, spec, rule=rule)
    scores = importance_row(run, trace, weights, method, example.target, seed + example.index)
    counts = clamp_grid(grid, scores.size)
    result = {}
    for kind in kinds:
        survived = []
        for k in counts:
            model = mask_components(weights, spec, select_components(scores, k, kind))
            predicted, _ = model.predict(example.tokens)
            survived.append(predicted == example.target)
        result[kind] = survived
    return result


def run_component_masking(examples, weights, spec, method, grid, kinds=MASKING_KINDS, rule=None,
                          seed=0, progress=False):
    """Accuracy after masking the top or bottom k components, one curve per kind."""
    if method not in MASKING_METHODS:
        raise UsageError(f"Unknown masking method {method!r}; choose from {', '.join(MASKING_METHODS)}.")
    spec = spec.resolve(weights.config, 1)
    filtered = filter_correct(examples, weights)
    results = [
        component_masking_example(example, trace, weights, spec, method, kinds, grid, rule, seed)
        for example, _, trace in tqdm(filtered, desc=f'masking {method}', disable=not progress)
    ]
    example_ids = [example.index for example, _, _ in filtered]
    grid = [int(k) for k in grid]
    curves = [
        curve_from_rows(method, kind, grid, [result[kind] for result in results], example_ids)
        for kind in kinds
    ]
    logger.info(f"Component masking ({spec.kind}@{spec.layer}, {method}) over {len(filtered)} examples")
    return curves


@dataclass(frozen=True, eq=False)
class ComponentLayout:
    kind: str
    layers: tuple
    labels: tuple
    scores: np.ndarray
    num_examples: int


def component_layout(examples, weights, decomposition, layers, rule=None, groups=None):
    """Mean DePass score of each head (or neuron bin) per layer over correctly predicted examples."""
    filtered = filter_correct(examples, weights)
    rows = []
    labels = None
    for layer in layers:
        spec = masking_spec(decomposition, layer, groups)
        totals = None
        for example, _, trace in filtered:
            run = run_decomposed(trace, weights, spec, rule=rule)
            row = importance_row(run, trace, weights, DEPASS, example.target)
            totals = row if totals is None else totals + row
        labels = labels or tuple(label.split('.', 1)[1] for label in run.labels[:-1])
        rows.append(totals / len(filtered))
    if not rows:
        raise EvaluationError("Component layout needs at least one layer.")
    return ComponentLayout(spec.kind, tuple(layers), labels, np.vstack(rows), len(filtered))
