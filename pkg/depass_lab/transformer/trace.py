import logging
from dataclasses import dataclass

import numpy as np

from depass_lab.exceptions import ArchiveFormatError, InputError
from model_io.archive import read_archive, write_archive

logger = logging.getLogger(__name__)

LAYER_FIELDS = (
    'hidden_in', 'attn_probs', 'hidden_attn', 'mlp_activations',
    'rms_scale_attn', 'rms_scale_mlp', 'hidden_out',
)


@dataclass(frozen=True, eq=False)
class LayerTrace:
    """
    Frozen quantities of one decoder block.

    ``hidden_out`` is the very array the next block receives as ``hidden_in``.
    """
    hidden_in: np.ndarray        # (N, D)
    attn_probs: np.ndarray       # (H, N, N)
    hidden_attn: np.ndarray      # (N, D) residual stream after attention
    mlp_activations: np.ndarray  # (N, d_mlp)
    rms_scale_attn: np.ndarray   # (N,)
    rms_scale_mlp: np.ndarray    # (N,)
    hidden_out: np.ndarray       # (N, D)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    tokens: tuple
    embeddings: np.ndarray
    layers: tuple
    final_scale: np.ndarray
    final_normed: np.ndarray
    logits: np.ndarray
    model_fingerprint: str

    @property
    def num_positions(self):
        return len(self.tokens)

    @property
    def num_layers(self):
        return len(self.layers)

    def hidden(self, index):
        """Residual stream entering block ``index``; ``index == L`` is the last block's output."""
        if not 0 <= index <= self.num_layers:
            raise InputError(f"Residual index {index} outside 0..{self.num_layers}.")
        if index == 0:
            return self.embeddings
        return self.layers[index - 1].hidden_out

    def tensors(self):
        yield 'tokens', np.asarray(self.tokens, dtype=np.int64)
        yield 'embeddings', self.embeddings
        for index, layer in enumerate(self.layers):
            for field in LAYER_FIELDS:
                yield f'layers.{index}.{field}', getattr(layer, field)
        yield 'final.scale', self.final_scale
        yield 'final.normed', self.final_normed
        yield 'logits', self.logits


def export_trace(trace, path):
    metadata = {
        'kind': 'trace',
        'model_fingerprint': trace.model_fingerprint,
        'num_layers': trace.num_layers,
    }
    write_archive(path, trace.tensors(), metadata)


def load_trace(path):
    metadata, tensors = read_archive(path)
    if metadata.get('kind') != 'trace':
        raise ArchiveFormatError(f"{path} does not hold a forward trace.")
    try:
        layers = tuple(
            LayerTrace(**{field: tensors[f'layers.{index}.{field}'] for field in LAYER_FIELDS})
            for index in range(int(metadata['num_layers']))
        )
        return ForwardTrace(
            tokens=tuple(int(t) for t in tensors['tokens']),
            embeddings=tensors['embeddings'],
            layers=layers,
            final_scale=tensors['final.scale'],
            final_normed=tensors['final.normed'],
            logits=tensors['logits'],
            model_fingerprint=metadata['model_fingerprint'],
        )
    except KeyError as exc:
        raise ArchiveFormatError(f"Trace archive {path} is missing {exc}.") from exc
