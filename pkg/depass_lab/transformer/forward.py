"""
Standard pre-norm decoder forward pass that records every quantity the
decomposed pass later holds fixed.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from depass_lab.exceptions import InputError, NumericDomainError
from .functional import ACTIVATIONS, apply_rope, causal_softmax, rmsnorm, rope_tables
from .trace import ForwardTrace, LayerTrace


@dataclass(frozen=True)
class AblationMask:
    """Heads whose output is zeroed and neurons whose activation is zeroed."""
    heads: frozenset = field(default_factory=frozenset)    # {(layer, head)}
    neurons: frozenset = field(default_factory=frozenset)  # {(layer, neuron)}

    def __bool__(self):
        return bool(self.heads or self.neurons)

    def heads_at(self, layer):
        return sorted(head for at, head in self.heads if at == layer)

    def neurons_at(self, layer):
        return sorted(neuron for at, neuron in self.neurons if at == layer)


@dataclass(frozen=True, eq=False)
class NextTokenDistribution:
    probabilities: np.ndarray

    def probability(self, token_id):
        return float(self.probabilities[token_id])


def check_tokens(tokens, config):
    tokens = [int(t) for t in tokens]
    if not 1 <= len(tokens) <= config.max_seq_len:
        raise InputError(
            f"Sequence length {len(tokens)} outside 1..{config.max_seq_len}."
        )
    bad = [t for t in tokens if not 0 <= t < config.vocab_size]
    if bad:
        raise InputError(f"Token ids {bad} outside vocabulary of size {config.vocab_size}.")
    return tuple(tokens)


def attention_block(x_normed, layer, config, positions, mask_heads=()):
    """
    Causal multi-head attention on normalised rows.

    Returns the (D,) sublayer output per position and the (H, N, N) probabilities.
    """
    n = x_normed.shape[0]
    dh = config.head_dim
    q = (x_normed @ layer.wq.T).reshape(n, config.num_heads, dh)
    k = (x_normed @ layer.wk.T).reshape(n, config.num_kv_heads, dh)
    v = (x_normed @ layer.wv.T).reshape(n, config.num_kv_heads, dh)
    if positions is not None:
        cos, sin = positions
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)

    # GQA: query head h reads kv head h // group_size.
    kv_index = np.arange(config.num_heads) // config.group_size
    k = k[:, kv_index, :]
    v = v[:, kv_index, :]
    scores = np.einsum('ihd,jhd->hij', q, k) / x_normed.dtype.type(math.sqrt(dh))
    probs = causal_softmax(scores)
    heads = np.einsum('hij,jhd->ihd', probs, v)
    if mask_heads:
        heads[:, list(mask_heads), :] = 0
    out = heads.reshape(n, config.num_heads * dh) @ layer.wo.T
    return out, probs


def mlp_activations(x_normed, layer, config):
    act = ACTIVATIONS[config.activation]
    if config.mlp_kind == 'gated':
        return act(x_normed @ layer.w_gate.T) * (x_normed @ layer.w_up.T)
    return act(x_normed @ layer.w_up.T)


def forward(tokens, weights, config=None, mask=None):
    """
    Run the model on one prompt; returns ``(logits, ForwardTrace)``.

    ``mask`` (an AblationMask) zeroes head outputs or neuron activations on
    the way; the trace then records the ablated run.
    """
    config = config or weights.config
    tokens = check_tokens(tokens, config)
    mask = mask or AblationMask()
    dtype = config.dtype
    n = len(tokens)

    positions = None
    if config.rope:
        positions = rope_tables(n, config.head_dim, config.rope_theta, dtype)

    embeddings = weights.embed[list(tokens)].astype(dtype)
    hidden = embeddings
    layer_traces = []
    for index, layer in enumerate(weights.layers):
        normed, scale_attn = rmsnorm(hidden, layer.attn_norm, config.norm_eps)
        attn_out, probs = attention_block(normed, layer, config, positions, mask.heads_at(index))
        hidden_attn = hidden + attn_out

        normed_mlp, scale_mlp = rmsnorm(hidden_attn, layer.mlp_norm, config.norm_eps)
        activations = mlp_activations(normed_mlp, layer, config)
        dead = mask.neurons_at(index)
        if dead:
            activations[:, dead] = 0
        hidden_out = hidden_attn + activations @ layer.w_down.T

        layer_traces.append(LayerTrace(
            hidden_in=hidden,
            attn_probs=probs,
            hidden_attn=hidden_attn,
            mlp_activations=activations,
            rms_scale_attn=scale_attn,
            rms_scale_mlp=scale_mlp,
            hidden_out=hidden_out,
        ))
        hidden = hidden_out

    final_normed, final_scale = rmsnorm(hidden, weights.final_norm, config.norm_eps)
    logits = final_normed @ weights.lm_head.T
    trace = ForwardTrace(
        tokens=tokens,
        embeddings=embeddings,
        layers=tuple(layer_traces),
        final_scale=final_scale,
        final_normed=final_normed,
        logits=logits,
        model_fingerprint=weights.fingerprint,
    )
    return logits, trace


def next_token_distribution(logits_row):
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if not np.all(np.isfinite(logits_row)):
        raise NumericDomainError("Logits contain non-finite values.")
    return NextTokenDistribution(special.softmax(logits_row))


def greedy_argmax(logits_row):
    """Highest logit; the lowest id wins ties."""
    logits_row = np.asarray(logits_row)
    if not np.all(np.isfinite(logits_row)):
        raise NumericDomainError("Logits contain non-finite values.")
    return int(np.argmax(logits_row))


def predict_next(tokens, weights, mask=None):
    """Greedy next token and its distribution at the last position."""
    logits, _ = forward(tokens, weights, mask=mask)
    return greedy_argmax(logits[-1]), next_token_distribution(logits[-1])
