import hashlib
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from depass_lab.exceptions import ConfigurationError
from .config import ModelConfig
from .prng import SplitMix64

logger = logging.getLogger(__name__)


def _frozen(array, dtype):
    array = np.ascontiguousarray(array, dtype=dtype)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """
    One decoder block. Projections are stored out x in, so ``x @ W.T`` applies them.

    wq: (H*dh, D), wk/wv: (H_kv*dh, D), wo: (D, H*dh).
    plain MLP uses w_up (d_mlp, D) and w_down (D, d_mlp); gated adds w_gate.
    """
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    w_gate: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class WeightSet:
    config: ModelConfig
    embed: np.ndarray
    layers: tuple
    final_norm: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self):
        check_shapes(self)

    # Manifest order is also the order generate_random_model consumes the stream in.
    def tensors(self):
        yield 'embed.tokens', self.embed
        for index, layer in enumerate(self.layers):
            prefix = f'layers.{index}'
            yield f'{prefix}.attn.wq', layer.wq
            yield f'{prefix}.attn.wk', layer.wk
            yield f'{prefix}.attn.wv', layer.wv
            yield f'{prefix}.attn.wo', layer.wo
            yield f'{prefix}.attn_norm.gain', layer.attn_norm
            yield f'{prefix}.mlp_norm.gain', layer.mlp_norm
            if layer.w_gate is not None:
                yield f'{prefix}.mlp.w_gate', layer.w_gate
            yield f'{prefix}.mlp.w_up', layer.w_up
            yield f'{prefix}.mlp.w_down', layer.w_down
        yield 'final_norm.gain', self.final_norm
        yield 'lm_head.weight', self.lm_head

    @cached_property
    def fingerprint(self):
        digest = hashlib.sha256(self.config.fingerprint().encode('ascii'))
        for name, array in self.tensors():
            digest.update(name.encode('utf-8'))
            digest.update(array.tobytes())
        return digest.hexdigest()

    def head_slice(self, head):
        dh = self.config.head_dim
        return slice(head * dh, (head + 1) * dh)

    def head_value(self, layer, head):
        """W_V rows feeding query head ``head`` (GQA maps it to its kv head)."""
        kv = self.config.kv_head(head)
        return self.layers[layer].wv[self.head_slice(kv)]

    def head_output(self, layer, head):
        """Columns of W_O that read head ``head``: (D, dh)."""
        return self.layers[layer].wo[:, self.head_slice(head)]

    def head_vo(self, layer, head):
        """W_VO for one head, acting on row vectors: x @ W_VO."""
        return self.head_value(layer, head).T @ self.head_output(layer, head).T

    def subkeys(self, layer, mode='gate'):
        """Rows f_k scored against normalised components when apportioning neurons."""
        weights = self.layers[layer]
        if weights.w_gate is None or mode == 'up':
            return weights.w_up
        if mode == 'gate':
            return weights.w_gate
        if mode == 'gate_plus_up':
            return weights.w_gate + weights.w_up
        raise ConfigurationError(f"Unknown gated subkey mode {mode!r}.")

    def subvalues(self, layer):
        """Rows v_k: (d_mlp, D)."""
        return self.layers[layer].w_down.T

    def with_layer(self, index, **changes):
        """Copy with some tensors of one layer replaced (fixtures, ablation oracles)."""
        dtype = self.config.dtype
        changes = {name: _frozen(value, dtype) for name, value in changes.items()}
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return replace(self, layers=tuple(layers))

    def astype(self, precision):
        config = self.config.with_precision(precision)
        return build_weight_set(config, dict(self.tensors()))


def expected_shapes(config):
    D, dh = config.d_model, config.head_dim
    shapes = {'embed.tokens': (config.vocab_size, D)}
    for index in range(config.num_layers):
        prefix = f'layers.{index}'
        shapes[f'{prefix}.attn.wq'] = (config.num_heads * dh, D)
        shapes[f'{prefix}.attn.wk'] = (config.num_kv_heads * dh, D)
        shapes[f'{prefix}.attn.wv'] = (config.num_kv_heads * dh, D)
        shapes[f'{prefix}.attn.wo'] = (D, config.num_heads * dh)
        shapes[f'{prefix}.attn_norm.gain'] = (D,)
        shapes[f'{prefix}.mlp_norm.gain'] = (D,)
        if config.mlp_kind == 'gated':
            shapes[f'{prefix}.mlp.w_gate'] = (config.d_mlp, D)
        shapes[f'{prefix}.mlp.w_up'] = (config.d_mlp, D)
        shapes[f'{prefix}.mlp.w_down'] = (D, config.d_mlp)
    shapes['final_norm.gain'] = (D,)
    shapes['lm_head.weight'] = (config.vocab_size, D)
    return shapes


def check_shapes(weights):
    expected = expected_shapes(weights.config)
    actual = {name: tuple(array.shape) for name, array in weights.tensors()}
    if set(actual) != set(expected):
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        raise ConfigurationError(f"Tensor set does not match config (missing {missing}, extra {extra}).")
    for name, shape in expected.items():
        if actual[name] != shape:
            raise ConfigurationError(f"Tensor {name} has shape {actual[name]}, config expects {shape}.")


def build_weight_set(config, tensors):
    """Assemble a WeightSet from a name -> array mapping laid out as in the manifest."""
    expected = expected_shapes(config)
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if unknown or missing:
        raise ConfigurationError(f"Tensor set does not match config (missing {missing}, unexpected {unknown}).")
    for name, shape in expected.items():
        if tuple(np.shape(tensors[name])) != shape:
            raise ConfigurationError(
                f"Tensor {name} has shape {tuple(np.shape(tensors[name]))}, config expects {shape}."
            )

    dtype = config.dtype
    layers = []
    for index in range(config.num_layers):
        prefix = f'layers.{index}'
        layers.append(LayerWeights(
            wq=_frozen(tensors[f'{prefix}.attn.wq'], dtype),
            wk=_frozen(tensors[f'{prefix}.attn.wk'], dtype),
            wv=_frozen(tensors[f'{prefix}.attn.wv'], dtype),
            wo=_frozen(tensors[f'{prefix}.attn.wo'], dtype),
            attn_norm=_frozen(tensors[f'{prefix}.attn_norm.gain'], dtype),
            mlp_norm=_frozen(tensors[f'{prefix}.mlp_norm.gain'], dtype),
            w_up=_frozen(tensors[f'{prefix}.mlp.w_up'], dtype),
            w_down=_frozen(tensors[f'{prefix}.mlp.w_down'], dtype),
            w_gate=(_frozen(tensors[f'{prefix}.mlp.w_gate'], dtype)
                    if config.mlp_kind == 'gated' else None),
        ))
    return WeightSet(
        config=config,
        embed=_frozen(tensors['embed.tokens'], dtype),
        layers=tuple(layers),
        final_norm=_frozen(tensors['final_norm.gain'], dtype),
        lm_head=_frozen(tensors['lm_head.weight'], dtype),
    )


def generate_random_model(config, seed):
    """
    Deterministic fixture weights: every matrix i.i.d. uniform on
    [-1/sqrt(D), +1/sqrt(D)] from one splitmix64 stream, consumed tensor by
    tensor in manifest order (row-major within a tensor). Norm gains are ones
    and consume nothing.
    """
    config.validate()
    stream = SplitMix64(seed)
    bound = 1.0 / math.sqrt(config.d_model)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith('.gain'):
            tensors[name] = np.ones(shape)
            continue
        count = int(np.prod(shape))
        tensors[name] = stream.uniform(count, -bound, bound).reshape(shape)

    weights = build_weight_set(config, tensors)
    logger.info(
        f"Generated {config.num_layers}-layer model (D={config.d_model}, "
        f"d_mlp={config.d_mlp}, V={config.vocab_size}) from seed {seed}"
    )
    return weights
