import json
import math
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from depass_lab.exceptions import (
    ArchiveFormatError, ConfigurationError, InputError, TokenizationError
)
from depass_lab.testing import FIXTURE_DIR, fixture_config_data, seed42_model
from .archive import (
    decode_archive, encode_archive, load_weights, save_weights, weights_from_archive
)
from .config import ModelConfig
from .prng import SplitMix64
from .serializers import parse_model_config
from .vocab import Vocab, detokenize, tokenize
from .weights import generate_random_model


def reference_splitmix64(seed, count):
    """Plain-integer splitmix64, the sequential textbook formulation."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def tiny_config(**overrides):
    data = dict(num_layers=1, num_heads=1, num_kv_heads=1, d_model=2, d_mlp=3,
                vocab_size=5, max_seq_len=8)
    data.update(overrides)
    return ModelConfig(**data)


class ModelConfigTests(SimpleTestCase):

    def test_fixture_config_parses(self):
        config = parse_model_config(fixture_config_data())
        self.assertEqual(config.num_layers, 4)
        self.assertEqual(config.head_dim, 16)
        self.assertEqual(config.dtype, np.dtype('<f4'))

    def test_kv_heads_default_to_heads(self):
        data = fixture_config_data()
        del data['num_kv_heads']
        self.assertEqual(parse_model_config(data).num_kv_heads, 4)

    def test_indivisible_model_width_rejected(self):
        with self.assertRaises(ConfigurationError):
            parse_model_config(fixture_config_data(d_model=63))

    def test_kv_heads_must_divide_heads(self):
        with self.assertRaises(ConfigurationError):
            tiny_config(num_heads=2, d_model=4, num_kv_heads=3)

    def test_negative_eps_rejected(self):
        with self.assertRaises(ConfigurationError):
            tiny_config(norm_eps=-1.0)

    def test_fingerprint_tracks_fields(self):
        self.assertEqual(tiny_config().fingerprint(), tiny_config().fingerprint())
        self.assertNotEqual(tiny_config().fingerprint(), tiny_config(d_mlp=4).fingerprint())


class RandomModelTests(SimpleTestCase):

    def test_stream_matches_sequential_reference(self):
        stream = SplitMix64(42)
        values = [int(v) for v in stream.next_uint64(5)] + [int(v) for v in stream.next_uint64(3)]
        self.assertEqual(values, reference_splitmix64(42, 8))

    def test_first_embedding_matches_reference(self):
        weights = seed42_model('f64')
        first = reference_splitmix64(42, 1)[0]
        bound = 1.0 / math.sqrt(64)
        expected = -bound + 2 * bound * ((first >> 11) * 2.0 ** -53)
        self.assertEqual(weights.embed[0, 0], expected)

    def test_generation_is_deterministic(self):
        first = generate_random_model(tiny_config(), 7)
        second = generate_random_model(tiny_config(), 7)
        for (name, a), (_, b) in zip(first.tensors(), second.tensors()):
            self.assertEqual(a.tobytes(), b.tobytes(), name)
        self.assertEqual(first.fingerprint, second.fingerprint)

    def test_gains_are_ones(self):
        weights = seed42_model()
        for layer in weights.layers:
            np.testing.assert_array_equal(layer.attn_norm, np.ones(64))
            np.testing.assert_array_equal(layer.mlp_norm, np.ones(64))
        np.testing.assert_array_equal(weights.final_norm, np.ones(64))

    def test_values_within_bound(self):
        weights = seed42_model('f64')
        for name, array in weights.tensors():
            if name.endswith('.gain'):
                continue
            self.assertLessEqual(np.abs(array).max(), 1 / 8, name)

    def test_f32_is_rounded_f64_draw(self):
        np.testing.assert_array_equal(
            seed42_model('f32').embed, seed42_model('f64').embed.astype(np.float32)
        )

    def test_gated_model_has_gate_projection(self):
        weights = generate_random_model(tiny_config(mlp_kind='gated'), 3)
        self.assertEqual(weights.layers[0].w_gate.shape, (3, 2))
        self.assertIn('layers.0.mlp.w_gate', dict(weights.tensors()))

    def test_weights_are_read_only(self):
        with self.assertRaises(ValueError):
            seed42_model().embed[0, 0] = 1.0


class ArchiveTests(SimpleTestCase):

    def test_weights_round_trip_bitwise(self):
        weights = seed42_model()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.archive'
            save_weights(weights, path)
            config, loaded = load_weights(path)
        self.assertEqual(config, weights.config)
        for (name, a), (_, b) in zip(weights.tensors(), loaded.tensors()):
            self.assertEqual(a.tobytes(), b.tobytes(), name)
        self.assertEqual(loaded.fingerprint, weights.fingerprint)

    def test_mixed_dtypes_round_trip(self):
        tensors = [
            ('a', np.arange(6, dtype=np.float32).reshape(2, 3)),
            ('b', np.array([1.5, -2.25])),
            ('c', np.array([[1, 2], [3, 4]], dtype=np.int64)),
        ]
        metadata, decoded = decode_archive(encode_archive(tensors, {'kind': 'test'}))
        self.assertEqual(metadata, {'kind': 'test'})
        self.assertEqual(list(decoded), ['a', 'b', 'c'])
        for name, array in tensors:
            self.assertEqual(decoded[name].dtype, array.dtype)
            np.testing.assert_array_equal(decoded[name], array)

    def test_truncated_blob_rejected(self):
        manifest = json.dumps({
            'format': 'depass-archive/1',
            'metadata': {},
            'tensors': [{'name': 'x', 'dtype': 'f32', 'shape': [2], 'offset': 0, 'length': 8}],
        }).encode('utf-8')
        data = struct.pack('<Q', len(manifest)) + manifest + b'\x00' * 4
        with self.assertRaises(ArchiveFormatError):
            decode_archive(data)

    def test_overlapping_offsets_rejected(self):
        manifest = json.dumps({
            'format': 'depass-archive/1',
            'metadata': {},
            'tensors': [
                {'name': 'x', 'dtype': 'f32', 'shape': [2], 'offset': 0, 'length': 8},
                {'name': 'y', 'dtype': 'f32', 'shape': [2], 'offset': 4, 'length': 8},
            ],
        }).encode('utf-8')
        data = struct.pack('<Q', len(manifest)) + manifest + b'\x00' * 16
        with self.assertRaises(ArchiveFormatError):
            decode_archive(data)

    def test_short_manifest_rejected(self):
        with self.assertRaises(ArchiveFormatError):
            decode_archive(struct.pack('<Q', 100) + b'{}')

    def test_shape_inconsistent_with_config(self):
        weights = generate_random_model(tiny_config(), 1)
        tensors = dict(weights.tensors())
        tensors['embed.tokens'] = np.zeros((5, 3), dtype=np.float32)
        data = encode_archive(tensors.items(), {'kind': 'weights', 'config': weights.config.to_dict()})
        metadata, decoded = decode_archive(data)
        with self.assertRaises(ConfigurationError):
            weights_from_archive(metadata, decoded)

    def test_precision_mismatch_rejected(self):
        weights = generate_random_model(tiny_config(), 1)
        config = weights.config.to_dict()
        config['numeric_precision'] = 'f64'
        data = encode_archive(weights.tensors(), {'kind': 'weights', 'config': config})
        with self.assertRaises(ConfigurationError):
            weights_from_archive(*decode_archive(data))


class VocabTests(SimpleTestCase):

    def setUp(self):
        self.vocab = Vocab(('<bos>', 'a', 'b'))

    def test_tokenize_prepends_bos(self):
        self.assertEqual(tokenize('a b', self.vocab), [0, 1, 2])

    def test_round_trip_from_ids(self):
        self.assertEqual(tokenize(detokenize([0, 2, 1], self.vocab), self.vocab), [0, 2, 1])

    def test_round_trip_from_text(self):
        self.assertEqual(detokenize(tokenize('b a b', self.vocab), self.vocab), 'b a b')

    def test_unknown_word_named(self):
        with self.assertRaisesMessage(TokenizationError, "'c'"):
            tokenize('a c', self.vocab)

    def test_duplicate_entries_rejected(self):
        with self.assertRaises(InputError):
            Vocab(('<bos>', 'a', 'a'))

    def test_missing_bos_rejected(self):
        with self.assertRaises(InputError):
            Vocab(('a', 'b'))

    def test_fixture_vocab_matches_model(self):
        vocab = Vocab.load(FIXTURE_DIR / 'vocab.txt')
        self.assertEqual(len(vocab), seed42_model().config.vocab_size)

    def test_dump_and_load_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'vocab.txt'
            path.write_text(self.vocab.dump(), encoding='utf-8')
            self.assertEqual(Vocab.load(path), self.vocab)

    def test_blank_line_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'vocab.txt'
            path.write_text('<bos>\na\n\nb\n', encoding='utf-8')
            with self.assertRaisesMessage(InputError, 'line 3'):
                Vocab.load(path)
