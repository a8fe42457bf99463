import numpy as np
from scipy import special

from depass_lab.exceptions import NumericDomainError


def rms_scale(x, eps):
    """Per-row 1 / sqrt(mean(x^2) + eps) over the last axis."""
    x = np.asarray(x)
    mean_square = np.mean(x * x, axis=-1) + eps
    if np.any(mean_square <= 0):
        raise NumericDomainError("RMS of a zero vector is undefined with norm_eps = 0.")
    return (1.0 / np.sqrt(mean_square)).astype(x.dtype, copy=False)


def rmsnorm(x, gain, eps):
    """Return ``(gain * x * scale, scale)``; works on a vector or a stack of rows."""
    x = np.asarray(x)
    scale = rms_scale(x, eps)
    out = x * np.expand_dims(scale, -1) * gain
    return out.astype(x.dtype, copy=False), scale


def gelu(x):
    return (0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)


def silu(x):
    return (x * special.expit(x)).astype(x.dtype, copy=False)


ACTIVATIONS = {
    'gelu': gelu,
    'silu': silu,
}


def rope_tables(num_positions, head_dim, theta, dtype):
    inv_freq = 1.0 / (theta ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    freqs = np.outer(np.arange(num_positions, dtype=np.float64), inv_freq)
    angles = np.concatenate([freqs, freqs], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rotate_half(x):
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def apply_rope(x, cos, sin):
    """Rotate (N, heads, dh) query/key rows by position."""
    return x * cos[:, None, :] + rotate_half(x) * sin[:, None, :]


def causal_softmax(scores):
    """Softmax over the last axis of (..., N, N) scores with future keys masked."""
    n = scores.shape[-1]
    future = np.triu(np.ones((n, n), dtype=bool), k=1)
    masked = np.where(future, -np.inf, scores)
    return special.softmax(masked, axis=-1).astype(scores.dtype, copy=False)
