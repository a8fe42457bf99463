"""Gradient-free token scores that DePass is compared against."""
import numpy as np

from depass_lab.exceptions import UsageError

ATTENTION_MEAN = 'attention_mean'
ATTENTION_LAST = 'attention_last'
ATTENTION_ROLLOUT = 'attention_rollout'
UNIFORM = 'uniform'
RANDOM = 'random'

BASELINE_METHODS = (ATTENTION_MEAN, ATTENTION_LAST, ATTENTION_ROLLOUT, UNIFORM, RANDOM)


def attention_rollout(attention):
    """
    Rollout matrix over layers. ``attention`` is a sequence of (H, N, N)
    probability tensors, first layer first; each layer contributes the
    row-normalised (mean_h A + I) / 2, later layers multiplied on the left.
    """
    rollout = None
    for probs in attention:
        probs = np.asarray(probs, dtype=np.float64)
        mixed = (probs.mean(axis=0) + np.eye(probs.shape[-1])) / 2
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        rollout = mixed if rollout is None else mixed @ rollout
    return rollout


def baseline_scores(trace, method, position=-1, seed=0):
    """(N,) scores over input tokens for the query at ``position``."""
    attention = [layer.attn_probs for layer in trace.layers]
    n = trace.num_positions
    if method == ATTENTION_MEAN:
        return np.mean([np.asarray(a, dtype=np.float64)[:, position, :] for a in attention], axis=(0, 1))
    if method == ATTENTION_LAST:
        return np.asarray(attention[-1], dtype=np.float64)[:, position, :].mean(axis=0)
    if method == ATTENTION_ROLLOUT:
        return attention_rollout(attention)[position]
    if method == UNIFORM:
        return np.ones(n)
    if method == RANDOM:
        return np.random.default_rng(seed).random(n)
    raise UsageError(f"Unknown baseline {method!r}; choose from {', '.join(BASELINE_METHODS)}.")
