"""
Linear probes over hidden states.

A probe is multinomial logistic regression ``softmax(W x + b)`` trained by
full-batch gradient descent; its weight rows double as semantic directions
for subspace decomposition and direction attribution.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from scipy.special import log_softmax, softmax

from depass_lab.exceptions import ArchiveFormatError, InputError, TrainingError
from model_io.archive import read_archive, write_archive

logger = logging.getLogger(__name__)

UNTRUTHFUL_LABEL = 1
FLAG_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class LinearProbe:
    weights: np.ndarray
    bias: np.ndarray
    classes: tuple
    layer: int = None
    steps: int = 0
    learning_rate: float = 0.0
    final_loss: float = None
    train_accuracy: float = None
    loss_history: tuple = ()

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] < 2:
            raise TrainingError(f"Probe weights must be C x D with C >= 2, got {weights.shape}.")
        if bias.shape != (weights.shape[0],) or len(self.classes) != weights.shape[0]:
            raise TrainingError("Probe bias and class labels must match the weight rows.")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise TrainingError("Probe parameters are not finite.")
        weights.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'bias', bias)
        object.__setattr__(self, 'classes', tuple(int(c) for c in self.classes))

    @property
    def num_classes(self):
        return self.weights.shape[0]

    @property
    def width(self):
        return self.weights.shape[1]

    def class_index(self, label):
        try:
            return self.classes.index(int(label))
        except ValueError:
            raise InputError(f"Probe has no class {label}; classes are {self.classes}.") from None

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.width:
            raise InputError(f"Probe expects width {self.width}, got {x.shape[-1]}.")
        return x @ self.weights.T + self.bias

    def direction(self, label=UNTRUTHFUL_LABEL):
        """Row of ``label`` minus the mean of the other rows; w1 - w0 for two classes."""
        c = self.class_index(label)
        others = np.delete(self.weights, c, axis=0)
        return self.weights[c] - others.mean(axis=0)


def _cross_entropy(logits, targets):
    return -float(np.mean(log_softmax(logits, axis=1)[np.arange(targets.size), targets]))


def train_probe(features, labels, lr=None, steps=None, l2=None, seed=0, layer=None):
    """
    Fit a probe by full-batch gradient descent on cross-entropy plus
    ``l2/2 * |W|^2``. W and b start at zero; ``seed`` only shuffles the
    row order. ``loss_history`` holds the loss before every step and after
    the last one.
    """
    lr = settings.DEPASS_PROBE_LR if lr is None else float(lr)
    steps = settings.DEPASS_PROBE_STEPS if steps is None else int(steps)
    l2 = settings.DEPASS_PROBE_L2 if l2 is None else float(l2)

    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InputError(f"Need K x D features and K labels, got {X.shape} and {y.shape}.")
    if not np.all(np.isfinite(X)):
        raise InputError("Probe features contain non-finite values.")
    if lr <= 0 or steps < 0 or l2 < 0:
        raise InputError(f"Invalid probe hyperparameters lr={lr}, steps={steps}, l2={l2}.")

    classes, targets = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise TrainingError(f"Probe labels cover a single class ({classes.tolist()}).")

    order = np.random.default_rng(seed).permutation(X.shape[0])
    X, targets = X[order], targets[order]
    K = X.shape[0]
    onehot = np.eye(classes.size)[targets]

    W = np.zeros((classes.size, X.shape[1]))
    b = np.zeros(classes.size)
    history = []
    for _ in range(steps):
        logits = X @ W.T + b
        history.append(_cross_entropy(logits, targets) + 0.5 * l2 * float(np.sum(W * W)))
        residual = (softmax(logits, axis=1) - onehot) / K
        W = W - lr * (residual.T @ X + l2 * W)
        b = b - lr * residual.sum(axis=0)

    logits = X @ W.T + b
    final_loss = _cross_entropy(logits, targets) + 0.5 * l2 * float(np.sum(W * W))
    if not math.isfinite(final_loss):
        raise TrainingError(f"Probe training diverged at lr={lr}.")
    history.append(final_loss)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == targets))
    logger.info(f"Trained probe (layer={layer}, K={K}, C={classes.size}) loss {final_loss:.4f} "
                f"accuracy {accuracy:.3f}")
    return LinearProbe(W, b, tuple(classes), layer=layer, steps=steps, learning_rate=lr,
                       final_loss=final_loss, train_accuracy=accuracy, loss_history=tuple(history))


def probe_predict(probe, x):
    """Class probabilities softmax(W x + b) for a vector or a stack of vectors."""
    return softmax(probe.logits(x), axis=-1)


def probe_accuracy(probe, features, labels):
    predicted = np.asarray(probe.classes)[np.argmax(probe.logits(features), axis=-1)]
    return float(np.mean(predicted == np.asarray(labels)))


def resolve_min_layer(num_layers, min_layer=None):
    """First residual index of the averaging band; the default falls back to ceil(L/2) on shallow models."""
    if min_layer is None:
        min_layer = settings.DEPASS_PROBE_MIN_LAYER
        if min_layer > num_layers:
            return math.ceil(num_layers / 2)
    if not 0 <= min_layer <= num_layers:
        raise InputError(f"Minimum probe layer {min_layer} outside 0..{num_layers}.")
    return int(min_layer)


def probe_band(probes, num_layers, min_layer=None):
    """Probes at residual indices >= the band start, ordered by layer."""
    start = resolve_min_layer(num_layers, min_layer)
    band = sorted((p for p in probes if p.layer is not None and p.layer >= start), key=lambda p: p.layer)
    if not band:
        raise InputError(f"No probes at layers >= {start}.")
    for probe in band:
        if probe.layer > num_layers:
            raise InputError(f"Probe layer {probe.layer} outside 0..{num_layers}.")
    return band


def mean_untruthful_probability(trace, probes, min_layer=None, label=UNTRUTHFUL_LABEL):
    """Per-token mean probability of ``label`` over the probe band."""
    band = probe_band(probes, trace.num_layers, min_layer)
    probabilities = [
        probe_predict(probe, trace.hidden(probe.layer))[:, probe.class_index(label)] for probe in band
    ]
    return np.mean(probabilities, axis=0)


def flag_tokens(means, threshold=FLAG_THRESHOLD):
    return np.asarray(means) > threshold


def save_probes(probes, path):
    tensors = []
    entries = []
    for index, probe in enumerate(probes):
        tensors.append((f'probes.{index}.weights', probe.weights))
        tensors.append((f'probes.{index}.bias', probe.bias))
        entries.append({
            'classes': list(probe.classes),
            'layer': probe.layer,
            'steps': probe.steps,
            'learning_rate': probe.learning_rate,
            'final_loss': probe.final_loss,
            'train_accuracy': probe.train_accuracy,
        })
    return write_archive(path, tensors, {'kind': 'probes', 'probes': entries})


def probes_from_archive(metadata, tensors):
    if metadata.get('kind') != 'probes':
        raise ArchiveFormatError("Archive does not hold probes.")
    try:
        return [
            LinearProbe(tensors[f'probes.{index}.weights'], tensors[f'probes.{index}.bias'], **entry)
            for index, entry in enumerate(metadata['probes'])
        ]
    except (KeyError, TypeError) as exc:
        raise ArchiveFormatError(f"Probe archive is malformed: {exc}") from exc


def load_probes(path):
    return probes_from_archive(*read_archive(path))
