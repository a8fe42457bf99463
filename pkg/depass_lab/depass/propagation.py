"""
Per-stage propagation of an N x M x D component tensor with the standard
pass's RMS scales, attention probabilities and MLP activations held fixed.
"""
import logging

import numpy as np
from django.conf import settings
from scipy import special

from depass_lab.exceptions import InputError
from transformer.functional import rms_scale

logger = logging.getLogger(__name__)

SOFTMAX = 'softmax'
LINEAR_NORM = 'linear_norm'
LINEAR_WEIGHTED = 'linear_weighted'

APPORTION_RULES = (SOFTMAX, LINEAR_NORM, LINEAR_WEIGHTED)


def normalize_rule(rule):
    """Accepts ``linear-norm`` style spellings from the command line."""
    rule = (rule or settings.DEPASS_DEFAULT_RULE).replace('-', '_')
    if rule not in APPORTION_RULES:
        raise InputError(f"Unknown apportion rule {rule!r}; choose from {', '.join(APPORTION_RULES)}.")
    return rule


def propagate_rmsnorm(components, full_state, gain, eps, scale=None):
    """
    Scale every component by the full state's 1/RMS and the gain.

    ``scale`` may be passed in when the caller already holds the traced value.
    """
    if scale is None:
        scale = rms_scale(full_state, eps)
    return (components * scale[:, None, None]) * gain


def propagate_attention(components, normed, attn_probs, layer_weights, config):
    """
    residual + sum_h A^h . normed_m . W_VO^h for every component m.

    ``attn_probs`` is the traced (H, N, N) tensor.
    """
    n, m, _ = normed.shape
    dh = config.head_dim
    values = (normed @ layer_weights.wv.T).reshape(n, m, config.num_kv_heads, dh)
    values = values[:, :, np.arange(config.num_heads) // config.group_size, :]
    mixed = np.einsum('hij,jmhd->imhd', attn_probs, values)
    return components + mixed.reshape(n, m, config.num_heads * dh) @ layer_weights.wo.T


def mlp_preactivations(normed, subkeys):
    """a[i, m, k] = f_k . normed[i, m]."""
    return np.einsum('imd,kd->imk', normed, subkeys)


def apportion(preactivations, rule=SOFTMAX, denominator_eps=None):
    """
    Shares alpha[i, m, k] of neuron k's output at position i, normalised over
    the component axis. Computed in float64 whatever the input precision.
    """
    rule = normalize_rule(rule)
    a = np.asarray(preactivations, dtype=np.float64)
    m = a.shape[1]
    if rule == SOFTMAX:
        return special.softmax(a, axis=1)

    if rule == LINEAR_NORM:
        shifted = a - a.min(axis=1, keepdims=True)
        total = shifted.sum(axis=1, keepdims=True)
        degenerate = total == 0
        count = int(degenerate.sum())
        if count and m > 1:
            logger.warning(
                f"linear_norm: {count} (position, neuron) pairs have equal preactivations across "
                f"components; falling back to uniform shares"
            )
        with np.errstate(invalid='ignore', divide='ignore'):
            alpha = np.where(degenerate, 1.0 / m, shifted / np.where(degenerate, 1.0, total))
        return alpha

    eps = settings.DEPASS_LINEAR_DENOMINATOR_EPS if denominator_eps is None else denominator_eps
    total = a.sum(axis=1, keepdims=True)
    degenerate = np.abs(total) < eps
    count = int(degenerate.sum())
    if count:
        logger.warning(
            f"linear_weighted: {count} (position, neuron) pairs have |sum a| < {eps:g}; "
            f"falling back to uniform shares"
        )
    return np.where(degenerate, 1.0 / m, a / np.where(degenerate, 1.0, total))


def apportion_mlp(normed, subkeys, rule=SOFTMAX, denominator_eps=None):
    return apportion(mlp_preactivations(normed, subkeys), rule, denominator_eps)


def propagate_mlp(components, alpha, activations, subvalues):
    """
    components + sum_k alpha[i, m, k] * m[i, k] * v_k.

    ``subvalues`` is (d_mlp, D), one row v_k per neuron.
    """
    weighted = alpha * np.asarray(activations, dtype=np.float64)[:, None, :]
    update = weighted @ np.asarray(subvalues, dtype=np.float64)
    return components + update.astype(components.dtype, copy=False)
