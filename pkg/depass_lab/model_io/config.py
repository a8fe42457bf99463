import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from depass_lab.exceptions import ConfigurationError

MLP_KIND_CHOICES = [
    ('plain', 'Plain'),
    ('gated', 'Gated'),
]

ACTIVATION_CHOICES = [
    ('gelu', 'GELU'),
    ('silu', 'SiLU'),
]

PRECISION_CHOICES = [
    ('f32', 'float32'),
    ('f64', 'float64'),
]

DTYPES = {
    'f32': np.dtype('<f4'),
    'f64': np.dtype('<f8'),
}


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape and numerics of a bias-free, pre-norm decoder-only transformer.
    """
    num_layers: int
    num_heads: int
    num_kv_heads: int
    d_model: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int
    mlp_kind: str = 'plain'
    activation: str = 'gelu'
    rope: bool = False
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    numeric_precision: str = 'f32'

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ('num_layers', 'num_heads', 'num_kv_heads', 'd_model',
                     'd_mlp', 'vocab_size', 'max_seq_len'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}.")
        if self.d_model % self.num_heads:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})."
            )
        if self.num_kv_heads > self.num_heads or self.num_heads % self.num_kv_heads:
            raise ConfigurationError(
                f"num_kv_heads ({self.num_kv_heads}) must divide num_heads ({self.num_heads})."
            )
        if self.mlp_kind not in dict(MLP_KIND_CHOICES):
            raise ConfigurationError(f"Unknown mlp_kind {self.mlp_kind!r}.")
        if self.activation not in dict(ACTIVATION_CHOICES):
            raise ConfigurationError(f"Unknown activation {self.activation!r}.")
        if self.numeric_precision not in DTYPES:
            raise ConfigurationError(f"Unknown numeric_precision {self.numeric_precision!r}.")
        if self.norm_eps < 0:
            raise ConfigurationError(f"norm_eps must be non-negative, got {self.norm_eps}.")
        if self.rope and not self.rope_theta > 0:
            raise ConfigurationError(f"rope_theta must be positive, got {self.rope_theta}.")
        if self.rope and self.head_dim % 2:
            raise ConfigurationError(f"RoPE needs an even head dimension, got {self.head_dim}.")

    @property
    def head_dim(self):
        return self.d_model // self.num_heads

    @property
    def group_size(self):
        """Query heads sharing one key/value head."""
        return self.num_heads // self.num_kv_heads

    @property
    def dtype(self):
        return DTYPES[self.numeric_precision]

    def kv_head(self, head):
        return head // self.group_size

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')
        return hashlib.sha256(payload).hexdigest()

    def with_precision(self, precision):
        data = self.to_dict()
        data['numeric_precision'] = precision
        return ModelConfig(**data)
