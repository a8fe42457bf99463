"""
Cached desk-scale fixtures shared by the app test suites.
"""
import json
from functools import lru_cache
from pathlib import Path

import numpy as np

from model_io.serializers import parse_model_config
from model_io.vocab import BOS_ID, Vocab
from model_io.weights import generate_random_model

FIXTURE_DIR = Path(__file__).resolve().parent.parent / 'model_io' / 'fixtures'

SEED = 42
PROMPT_LENGTH = 16


def fixture_config_data(**overrides):
    data = json.loads((FIXTURE_DIR / 'seed42.json').read_text(encoding='utf-8'))
    data.update(overrides)
    return data


@lru_cache(maxsize=None)
def seed42_model(precision='f32'):
    """The L=4, H=4, D=64, d_mlp=128, V=97 model drawn from seed 42."""
    config = parse_model_config(fixture_config_data(numeric_precision=precision))
    return generate_random_model(config, SEED)


@lru_cache(maxsize=None)
def small_model(precision='f64', seed=7, **overrides):
    """Two-layer model for tests that run many forwards."""
    data = fixture_config_data(num_layers=2, d_model=16, d_mlp=32, num_heads=2,
                               num_kv_heads=2, numeric_precision=precision)
    data.update(overrides)
    return generate_random_model(parse_model_config(data), seed)


@lru_cache(maxsize=None)
def fixture_vocab():
    return Vocab.load(FIXTURE_DIR / 'vocab.txt')


def fixture_tokens(length=PROMPT_LENGTH, seed=SEED, vocab_size=97):
    """BOS followed by ``length - 1`` ids drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    body = rng.integers(1, vocab_size, size=length - 1)
    return [BOS_ID] + [int(t) for t in body]


def fixture_prompts(count, length=8, seed=SEED, vocab_size=97):
    rng = np.random.default_rng(seed)
    return [
        [BOS_ID] + [int(t) for t in rng.integers(1, vocab_size, size=length - 1)]
        for _ in range(count)
    ]


def separable_points(count=200, width=16, margin=1.0, seed=SEED):
    """Two alternating classes split along the first axis by a gap of ``margin``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    features = rng.normal(scale=0.5, size=(count, width))
    features[:, 0] = (2 * labels - 1) * (margin / 2 + rng.exponential(size=count))
    return features, labels
