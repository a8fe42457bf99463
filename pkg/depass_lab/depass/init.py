"""
Initial decompositions: token-wise, per attention head, per MLP neuron
group, and into a subspace and its orthogonal complement.
"""
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from depass_lab.exceptions import InputError
from .state import DecomposedState, Stage, StatePoint

TOKEN_WISE = 'token_wise'
ATTENTION_HEADS = 'attention_heads'
MLP_NEURONS = 'mlp_neurons'
SUBSPACE = 'subspace'

INIT_KINDS = (TOKEN_WISE, ATTENTION_HEADS, MLP_NEURONS, SUBSPACE)


@dataclass(frozen=True, eq=False)
class InitSpec:
    kind: str
    layer: int = 0
    groups: tuple = None
    projector: np.ndarray = None

    @classmethod
    def token_wise(cls, groups=None):
        """``groups=None`` gives one component per position."""
        return cls(TOKEN_WISE, 0, _as_groups(groups) if groups is not None else None)

    @classmethod
    def attention_heads(cls, layer):
        return cls(ATTENTION_HEADS, layer)

    @classmethod
    def mlp_neurons(cls, layer, groups=None):
        return cls(MLP_NEURONS, layer, _as_groups(groups) if groups is not None else None)

    @classmethod
    def subspace(cls, layer, projector):
        matrix = np.asarray(getattr(projector, 'matrix', projector))
        return cls(SUBSPACE, layer, None, matrix)

    def resolve(self, config, num_positions):
        """Validate against a model and prompt; fills in default groups."""
        if self.kind not in INIT_KINDS:
            raise InputError(f"Unknown decomposition {self.kind!r}.")
        if self.kind == TOKEN_WISE:
            groups = self.groups or tuple((i,) for i in range(num_positions))
            check_partition(groups, num_positions, 'positions')
            return InitSpec(self.kind, 0, groups)

        last = config.num_layers if self.kind == SUBSPACE else config.num_layers - 1
        if not 0 <= self.layer <= last:
            raise InputError(f"Layer {self.layer} outside 0..{last} for {self.kind}.")
        if self.kind == MLP_NEURONS:
            groups = self.groups or contiguous_bins(config.d_mlp)
            check_partition(groups, config.d_mlp, 'neurons')
            return InitSpec(self.kind, self.layer, groups)
        if self.kind == SUBSPACE:
            D = config.d_model
            if self.projector is None or self.projector.shape != (D, D):
                raise InputError(f"Subspace decomposition needs a {D}x{D} projector.")
        return self

    def num_components(self, config):
        """Component count M of a resolved spec."""
        if self.kind == TOKEN_WISE:
            return len(self.groups)
        if self.kind == ATTENTION_HEADS:
            return config.num_heads + 1
        if self.kind == MLP_NEURONS:
            return len(self.groups) + 1
        return 2

    def mlp_ahead(self, config):
        """Whether any MLP stage runs after the init point."""
        if self.kind == MLP_NEURONS:
            return self.layer + 1 < config.num_layers
        return self.layer < config.num_layers


def _as_groups(groups):
    return tuple(tuple(int(i) for i in group) for group in groups)


def contiguous_bins(size, bin_size=None):
    bin_size = bin_size or settings.DEPASS_NEURON_BIN_SIZE
    if bin_size < 1:
        raise InputError(f"Bin size must be positive, got {bin_size}.")
    return tuple(tuple(range(start, min(start + bin_size, size))) for start in range(0, size, bin_size))


def check_partition(groups, size, what):
    seen = []
    for index, group in enumerate(groups):
        if not group:
            raise InputError(f"Group {index} of {what} is empty.")
        seen.extend(group)
    if sorted(seen) != list(range(size)):
        raise InputError(f"Groups must partition {what} 0..{size - 1} exactly once each.")


def groups_from_word_spans(spans, num_positions):
    """
    Token-wise groups from word spans ``[(start, stop), ...]`` over token
    positions. Positions outside every span (BOS, punctuation) stay singletons.
    """
    owner = {}
    groups = []
    for start, stop in spans:
        if not 0 <= start < stop <= num_positions:
            raise InputError(f"Word span ({start}, {stop}) outside 0..{num_positions}.")
        group = tuple(range(start, stop))
        if any(i in owner for i in group):
            raise InputError(f"Word span ({start}, {stop}) overlaps another span.")
        owner.update({i: len(groups) for i in group})
        groups.append(group)
    groups.extend((i,) for i in range(num_positions) if i not in owner)
    return tuple(sorted(groups, key=lambda group: group[0]))


def token_labels(groups, tokens):
    labels = []
    for group in groups:
        if len(group) == 1:
            labels.append(f'pos{group[0]}:{tokens[group[0]]}')
        else:
            labels.append('pos' + '+'.join(str(i) for i in group))
    return tuple(labels)


def neuron_labels(layer, groups):
    labels = []
    for index, group in enumerate(groups):
        if list(group) == list(range(group[0], group[0] + len(group))):
            labels.append(f'L{layer}.N{group[0]}-{group[-1]}')
        else:
            labels.append(f'L{layer}.G{index}')
    return tuple(labels) + ('residual',)


def head_outputs(trace, weights, layer):
    """Per-head attention sublayer outputs (N, H, D) rebuilt from the trace."""
    config = weights.config
    layer_trace = trace.layers[layer]
    layer_weights = weights.layers[layer]
    normed = (layer_trace.hidden_in * layer_trace.rms_scale_attn[:, None]) * layer_weights.attn_norm
    outputs = np.empty((trace.num_positions, config.num_heads, config.d_model), dtype=normed.dtype)
    for head in range(config.num_heads):
        mixed = layer_trace.attn_probs[head] @ normed
        outputs[:, head, :] = mixed @ weights.head_vo(layer, head)
    return outputs


def init_decomposition(trace, weights, spec):
    """Build the starting DecomposedState; components sum to the traced state at its point."""
    config = weights.config
    spec = spec.resolve(config, trace.num_positions)
    n, D = trace.num_positions, config.d_model
    dtype = trace.embeddings.dtype

    if spec.kind == TOKEN_WISE:
        data = np.zeros((n, len(spec.groups), D), dtype=dtype)
        for g, group in enumerate(spec.groups):
            data[list(group), g, :] = trace.embeddings[list(group)]
        return DecomposedState(data, token_labels(spec.groups, trace.tokens), 0,
                               StatePoint(0, Stage.PRE_ATTENTION), spec.kind)

    layer = spec.layer
    if spec.kind == ATTENTION_HEADS:
        heads = head_outputs(trace, weights, layer)
        data = np.concatenate([heads, trace.layers[layer].hidden_in[:, None, :]], axis=1)
        labels = tuple(f'L{layer}.H{h}' for h in range(config.num_heads)) + ('residual',)
        return DecomposedState(data, labels, layer, StatePoint(layer, Stage.POST_ATTENTION), spec.kind)

    if spec.kind == MLP_NEURONS:
        layer_trace = trace.layers[layer]
        w_down = weights.layers[layer].w_down
        data = np.empty((n, len(spec.groups) + 1, D), dtype=dtype)
        for g, group in enumerate(spec.groups):
            cols = list(group)
            data[:, g, :] = layer_trace.mlp_activations[:, cols] @ w_down[:, cols].T
        data[:, -1, :] = layer_trace.hidden_attn
        return DecomposedState(data, neuron_labels(layer, spec.groups), layer,
                               StatePoint(layer, Stage.POST_MLP), spec.kind)

    x = trace.hidden(layer)
    parallel = (x @ spec.projector.T).astype(dtype)
    data = np.stack([parallel, x - parallel], axis=1)
    return DecomposedState(data, ('parallel', 'orthogonal'), layer,
                           StatePoint(layer, Stage.PRE_ATTENTION), spec.kind)
