"""Command outputs: staged writes and the run manifest kept beside each artifact."""
import hashlib
import logging
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from rest_framework.renderers import JSONRenderer

from depass_lab import __version__
from depass_lab.exceptions import InputError
from .serializers import RunManifestSerializer

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = '.manifest.json'


@contextmanager
def staged_output(path):
    """
    Yield a temporary path in the target directory. It is renamed onto
    ``path`` when the block finishes and removed if the block raises.
    """
    path = Path(path)
    if not path.parent.is_dir():
        raise InputError(f"Output directory {path.parent} does not exist.")
    fd, staging = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.part', dir=path.parent)
    os.close(fd)
    staging = Path(staging)
    try:
        yield staging
        os.replace(staging, path)
    except BaseException:
        staging.unlink(missing_ok=True)
        raise
    logger.info(f"Wrote {path}")


def write_output(path, data):
    with staged_output(path) as staging:
        staging.write_bytes(data)


def file_digest(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise InputError(f"Cannot read {path}: {exc}") from exc


@dataclass
class RunManifest:
    command: str
    flags: dict
    model_fingerprint: str = None
    inputs: dict = field(default_factory=dict)
    version: str = __version__
    wall_time: float = 0.0


def manifest_path(output):
    return Path(f'{output}{MANIFEST_SUFFIX}')


def write_manifest(manifest, output):
    data = JSONRenderer().render(RunManifestSerializer(manifest).data, renderer_context={'indent': 2})
    write_output(manifest_path(output), data)
