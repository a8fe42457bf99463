"""
Tensor archive: an 8-byte little-endian manifest length, a UTF-8 JSON
manifest, then one contiguous little-endian blob.

Manifest::

    {"format": "depass-archive/1",
     "metadata": {...},
     "tensors": [{"name": "layers.0.attn.wq", "dtype": "f32",
                  "shape": [64, 64], "offset": 0, "length": 16384}, ...]}

Tensors are packed back to back in manifest order starting at offset 0.
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from depass_lab.exceptions import ArchiveFormatError, ConfigurationError
from .serializers import parse_model_config
from .weights import build_weight_set

logger = logging.getLogger(__name__)

FORMAT = 'depass-archive/1'
LENGTH_PREFIX = struct.Struct('<Q')

ARCHIVE_DTYPES = {
    'f32': np.dtype('<f4'),
    'f64': np.dtype('<f8'),
    'i64': np.dtype('<i8'),
}
DTYPE_NAMES = {dtype: name for name, dtype in ARCHIVE_DTYPES.items()}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    length: int

    def to_dict(self):
        return {
            'name': self.name,
            'dtype': self.dtype,
            'shape': list(self.shape),
            'offset': self.offset,
            'length': self.length,
        }


def _archive_dtype(array):
    dtype = array.dtype.newbyteorder('<') if array.dtype.byteorder == '>' else array.dtype
    if dtype.kind == 'f':
        dtype = np.dtype('<f4') if dtype.itemsize == 4 else np.dtype('<f8')
    elif dtype.kind in 'iub':
        dtype = np.dtype('<i8')
    name = DTYPE_NAMES.get(np.dtype(dtype))
    if name is None:
        raise ArchiveFormatError(f"Unsupported dtype {array.dtype} for archive.")
    return name


def encode_archive(tensors, metadata=None):
    """Serialise ``(name, array)`` pairs (in the given order) to archive bytes."""
    entries = []
    chunks = []
    offset = 0
    seen = set()
    for name, array in tensors:
        if name in seen:
            raise ArchiveFormatError(f"Duplicate tensor name {name!r}.")
        seen.add(name)
        array = np.asarray(array)
        dtype_name = _archive_dtype(array)
        data = np.ascontiguousarray(array, dtype=ARCHIVE_DTYPES[dtype_name]).tobytes()
        entries.append(TensorEntry(name, dtype_name, tuple(int(d) for d in array.shape), offset, len(data)))
        chunks.append(data)
        offset += len(data)

    manifest = {
        'format': FORMAT,
        'metadata': metadata or {},
        'tensors': [entry.to_dict() for entry in entries],
    }
    header = json.dumps(manifest, sort_keys=True).encode('utf-8')
    return LENGTH_PREFIX.pack(len(header)) + header + b''.join(chunks)


def _parse_entries(raw_entries):
    if not isinstance(raw_entries, list):
        raise ArchiveFormatError("Manifest 'tensors' must be a list.")
    entries = []
    expected_offset = 0
    names = set()
    for raw in raw_entries:
        try:
            entry = TensorEntry(
                name=str(raw['name']),
                dtype=str(raw['dtype']),
                shape=tuple(int(d) for d in raw['shape']),
                offset=int(raw['offset']),
                length=int(raw['length']),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveFormatError(f"Malformed manifest entry {raw!r}: {exc}") from exc
        if entry.name in names:
            raise ArchiveFormatError(f"Duplicate tensor name {entry.name!r} in manifest.")
        names.add(entry.name)
        if entry.dtype not in ARCHIVE_DTYPES:
            raise ArchiveFormatError(f"Tensor {entry.name}: unsupported dtype {entry.dtype!r}.")
        if any(d < 0 for d in entry.shape):
            raise ArchiveFormatError(f"Tensor {entry.name}: negative dimension in {entry.shape}.")
        declared = int(np.prod(entry.shape, dtype=np.int64)) * ARCHIVE_DTYPES[entry.dtype].itemsize
        if entry.length != declared:
            raise ArchiveFormatError(
                f"Tensor {entry.name}: length {entry.length} does not match shape {entry.shape} "
                f"({declared} bytes)."
            )
        if entry.offset != expected_offset:
            raise ArchiveFormatError(
                f"Tensor {entry.name}: offset {entry.offset} overlaps or leaves a gap "
                f"(expected {expected_offset})."
            )
        expected_offset += entry.length
        entries.append(entry)
    return entries, expected_offset


def decode_archive(data):
    """Parse archive bytes into ``(metadata, {name: array})``; tensors keep manifest order."""
    if len(data) < LENGTH_PREFIX.size:
        raise ArchiveFormatError("Archive is shorter than its length prefix.")
    (header_length,) = LENGTH_PREFIX.unpack_from(data)
    header_end = LENGTH_PREFIX.size + header_length
    if header_end > len(data):
        raise ArchiveFormatError(
            f"Manifest declares {header_length} bytes but only {len(data) - LENGTH_PREFIX.size} follow."
        )
    try:
        manifest = json.loads(data[LENGTH_PREFIX.size:header_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"Manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get('format') != FORMAT:
        raise ArchiveFormatError(f"Not a {FORMAT} archive.")

    # Validate the whole manifest before touching the blob.
    entries, total = _parse_entries(manifest.get('tensors'))
    blob = memoryview(data)[header_end:]
    if len(blob) != total:
        raise ArchiveFormatError(f"Blob holds {len(blob)} bytes, manifest declares {total}.")

    tensors = {}
    for entry in entries:
        chunk = blob[entry.offset:entry.offset + entry.length]
        array = np.frombuffer(chunk, dtype=ARCHIVE_DTYPES[entry.dtype]).reshape(entry.shape).copy()
        tensors[entry.name] = array
    metadata = manifest.get('metadata') or {}
    return metadata, tensors


def write_archive(path, tensors, metadata=None):
    data = encode_archive(tensors, metadata)
    Path(path).write_bytes(data)
    logger.info(f"Wrote archive {path} ({len(data)} bytes)")
    return data


def read_archive(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveFormatError(f"Cannot read archive {path}: {exc}") from exc
    return decode_archive(data)


def weights_archive_bytes(weights):
    metadata = {'kind': 'weights', 'config': weights.config.to_dict()}
    return encode_archive(weights.tensors(), metadata)


def save_weights(weights, path):
    data = weights_archive_bytes(weights)
    Path(path).write_bytes(data)
    logger.info(f"Saved weights {weights.fingerprint[:12]} to {path}")


def weights_from_archive(metadata, tensors):
    if metadata.get('kind') != 'weights' or 'config' not in metadata:
        raise ArchiveFormatError("Archive does not hold model weights.")
    config = parse_model_config(metadata['config'])
    for name, array in tensors.items():
        if array.dtype != config.dtype:
            raise ConfigurationError(
                f"Tensor {name} is {array.dtype}, config precision is {config.numeric_precision}."
            )
    return config, build_weight_set(config, tensors)


def load_weights(path):
    metadata, tensors = read_archive(path)
    return weights_from_archive(metadata, tensors)
