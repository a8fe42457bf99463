"""Neuron-level attribution for one layer: DePass against per-neuron ablation."""
import logging
import time
from dataclasses import dataclass

import numpy as np

from attribution.scores import logit_attribution, target_direction
from depass.init import InitSpec
from depass.runner import run_decomposed
from depass_lab.exceptions import EvaluationError
from transformer.forward import AblationMask, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NeuronScores:
    layer: int
    scores: np.ndarray
    seconds: float


@dataclass(frozen=True)
class BenchResult:
    layer: int
    d_mlp: int
    num_examples: int
    t_depass: float
    t_ablation: float

    @property
    def speedup(self):
        return self.t_ablation / self.t_depass if self.t_depass > 0 else float('inf')

    def to_dict(self):
        return {
            'layer': self.layer,
            'd_mlp': self.d_mlp,
            'num_examples': self.num_examples,
            't_depass': self.t_depass,
            't_ablation': self.t_ablation,
            'speedup': self.speedup,
        }


def _check(examples):
    if not examples:
        raise EvaluationError("Neuron scoring needs at least one example.")


def ablation_oracle_neurons(examples, weights, layer):
    """
    Score of neuron k = logit_y(full) - logit_y(k zeroed) at the last
    position, one fresh forward per neuron, averaged over examples.
    """
    _check(examples)
    d_mlp = weights.config.d_mlp
    scores = np.zeros(d_mlp)
    start = time.perf_counter()
    for example in examples:
        base = forward(example.tokens, weights)[0][-1, example.target]
        for k in range(d_mlp):
            masked, _ = forward(example.tokens, weights, mask=AblationMask(neurons=frozenset({(layer, k)})))
            scores[k] += float(base) - float(masked[-1, example.target])
    seconds = time.perf_counter() - start
    return NeuronScores(layer, scores / len(examples), seconds)


def depass_neuron_scores(examples, weights, layer, rule=None):
    """Logit attribution to every single neuron of ``layer`` from one decomposed pass per example."""
    _check(examples)
    d_mlp = weights.config.d_mlp
    spec = InitSpec.mlp_neurons(layer, [(k,) for k in range(d_mlp)])
    scores = np.zeros(d_mlp)
    start = time.perf_counter()
    for example in examples:
        _, trace = forward(example.tokens, weights)
        run = run_decomposed(trace, weights, spec, rule=rule, check=False)
        row = logit_attribution(run.final_normed, target_direction(weights, example.target))[-1]
        scores += row[:d_mlp]
    seconds = time.perf_counter() - start
    return NeuronScores(layer, scores / len(examples), seconds)


def bench_depass_vs_ablation(examples, weights, layer, rule=None):
    depass = depass_neuron_scores(examples, weights, layer, rule)
    oracle = ablation_oracle_neurons(examples, weights, layer)
    result = BenchResult(layer, weights.config.d_mlp, len(examples), depass.seconds, oracle.seconds)
    logger.info(f"Layer {layer} neurons: DePass {result.t_depass:.3f}s, ablation {result.t_ablation:.3f}s "
                f"({result.speedup:.1f}x)")
    return result
