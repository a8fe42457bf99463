"""Layer-wise probe suite: one probe per residual index on last-token states."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from depass_lab.exceptions import InputError, TrainingError
from .linear import probe_accuracy, train_probe

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LayerProbeResult:
    layer: int
    probe: object
    train_accuracy: float
    test_accuracy: float


@dataclass(frozen=True, eq=False)
class ProbeSuiteReport:
    results: tuple
    train_size: int
    test_size: int

    @property
    def probes(self):
        return [result.probe for result in self.results]

    @property
    def best_layer(self):
        best = max(self.results, key=lambda result: (result.test_accuracy, -result.layer))
        return best.layer

    def rows(self):
        return [
            {'layer': r.layer, 'train_accuracy': r.train_accuracy, 'test_accuracy': r.test_accuracy}
            for r in self.results
        ]


def last_token_states(traces, layer):
    return np.stack([trace.hidden(layer)[-1] for trace in traces]).astype(np.float64)


def balanced_split(labels, test_fraction=0.25, seed=0):
    """
    Per-class shuffled split; each class sends floor(n_c * fraction) examples
    (at least one when it has two or more) to the test side.
    """
    if not 0 < test_fraction < 1:
        raise InputError(f"Test fraction must lie in (0, 1), got {test_fraction}.")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        count = math.floor(members.size * test_fraction)
        if members.size >= 2:
            count = max(count, 1)
        test.extend(members[:count])
        train.extend(members[count:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def train_layer_probes(traces, labels, layers=None, test_fraction=0.25, seed=0, **hyperparameters):
    """Train and score a probe at every residual index in ``layers`` (default 1..L)."""
    traces = list(traces)
    labels = np.asarray(labels)
    if not traces or labels.shape != (len(traces),):
        raise InputError(f"Need one label per trace, got {labels.shape} for {len(traces)} traces.")
    num_layers = traces[0].num_layers
    layers = range(1, num_layers + 1) if layers is None else layers

    train_idx, test_idx = balanced_split(labels, test_fraction, seed)
    if np.unique(labels[train_idx]).size < 2:
        raise TrainingError("Training split covers a single class.")

    results = []
    for layer in layers:
        if not 0 <= layer <= num_layers:
            raise InputError(f"Layer {layer} outside 0..{num_layers}.")
        features = last_token_states(traces, layer)
        probe = train_probe(features[train_idx], labels[train_idx], seed=seed, layer=layer,
                            **hyperparameters)
        test_accuracy = float('nan')
        if test_idx.size:
            test_accuracy = probe_accuracy(probe, features[test_idx], labels[test_idx])
        results.append(LayerProbeResult(layer, probe, probe.train_accuracy, test_accuracy))
        logger.info(f"Layer {layer}: train {probe.train_accuracy:.3f} test {test_accuracy:.3f}")
    return ProbeSuiteReport(tuple(results), int(train_idx.size), int(test_idx.size))
