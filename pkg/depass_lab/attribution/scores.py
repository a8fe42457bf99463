"""
Scores over decomposed components: logit and direction attribution,
importance variants used for component masking, and per-component decoding.
"""
import numpy as np

from depass.init import MLP_NEURONS
from depass.state import DecomposedState, Stage
from depass_lab.exceptions import AttributionError, UsageError

DEPASS = 'depass'
DEPASS_ABS = 'depass_abs'
NORM = 'norm'
COEF = 'coef'

IMPORTANCE_METHODS = (DEPASS, DEPASS_ABS, NORM, COEF)


def _data(state):
    return state.data if isinstance(state, DecomposedState) else np.asarray(state)


def target_direction(weights, token_id):
    """LM-head row w_y for ``token_id``."""
    vocab_size = weights.config.vocab_size
    if not 0 <= int(token_id) < vocab_size:
        raise AttributionError(f"Target token {token_id} outside vocabulary of size {vocab_size}.")
    return weights.lm_head[int(token_id)]


def logit_attribution(final_normed, w_y):
    """(N, M) scores w_y . component; each row sums to the logit of y at that position."""
    if isinstance(final_normed, DecomposedState) and final_normed.point.stage is not Stage.POST_FINAL_NORM:
        raise AttributionError(
            f"Logit attribution needs components after the final norm, got {final_normed.point}."
        )
    return _data(final_normed) @ np.asarray(w_y)


def snapshot_at(run, layer):
    try:
        return run.snapshots[layer]
    except KeyError:
        raise AttributionError(
            f"No snapshot at residual index {layer}; available: {sorted(run.snapshots)}."
        ) from None


def direction_attribution(state, v):
    """(N, M) projections of every component onto ``v``."""
    data = _data(state)
    v = np.asarray(v)
    if v.shape != (data.shape[-1],):
        raise AttributionError(f"Direction of shape {v.shape} does not match model width {data.shape[-1]}.")
    return data @ v


def component_importance(run, method, w_y=None, trace=None):
    """
    (N, M) importance of each component.

    depass / depass_abs score the final components against ``w_y``; norm is
    the size of each component where it was created; coef sums traced
    |activation| over each neuron group (the residual scores 0).
    """
    if method == DEPASS:
        return logit_attribution(run.final_normed, w_y)
    if method == DEPASS_ABS:
        return np.abs(logit_attribution(run.final_normed, w_y))
    if method == NORM:
        return np.linalg.norm(run.initial.data, axis=-1)
    if method == COEF:
        if run.kind != MLP_NEURONS:
            raise UsageError(f"coef scores need a neuron decomposition, not {run.kind}.")
        if trace is None:
            raise UsageError("coef scores need the forward trace.")
        activations = np.abs(trace.layers[run.spec.layer].mlp_activations)
        scores = np.zeros(run.initial.data.shape[:2], dtype=activations.dtype)
        for g, group in enumerate(run.spec.groups):
            scores[:, g] = activations[:, list(group)].sum(axis=1)
        return scores
    raise UsageError(f"Unknown importance method {method!r}; choose from {', '.join(IMPORTANCE_METHODS)}.")


def normalize_scores(scores):
    """raw / sum|raw| along the component axis; all-zero rows stay zero."""
    scores = np.asarray(scores, dtype=np.float64)
    total = np.abs(scores).sum(axis=-1, keepdims=True)
    return np.divide(scores, total, out=np.zeros_like(scores), where=total > 0)


def completeness_error(scores_row, full_value):
    """|sum_m s_m - full| / max(|full|, 1e-12)."""
    return abs(float(np.sum(scores_row)) - float(full_value)) / max(abs(float(full_value)), 1e-12)


def decode_components(run, weights, position=-1, top_k=5):
    """Top-k tokens each final component promotes on its own at ``position``."""
    logits = run.final_normed.data[position] @ weights.lm_head.T
    decoded = []
    for label, row in zip(run.labels, logits):
        order = np.lexsort((np.arange(row.size), -row))[:top_k]
        decoded.append({
            'label': label,
            'tokens': [{'token_id': int(t), 'logit': float(row[t])} for t in order],
        })
    return decoded


def direction_contributions(run, layer, direction, position=-1, top_k=10):
    """
    The direction's activation at ``position`` of residual ``layer`` and the
    components that build it, largest |contribution| first.
    """
    scores = direction_attribution(snapshot_at(run, layer), direction)[position]
    order = np.lexsort((np.arange(scores.size), -np.abs(scores)))[:top_k]
    return {
        'layer': layer,
        'position': position,
        'activation': float(scores.sum()),
        'contributions': [
            {'label': run.labels[m], 'score': float(scores[m])} for m in order
        ],
    }
