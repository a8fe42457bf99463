import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from depass_lab.exceptions import ArchiveFormatError, DegenerateSubspaceError, InputError
from model_io.archive import read_archive, write_archive
from .linear import probes_from_archive

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Orthogonal projector P = U U^T onto the span of a set of directions."""
    matrix: np.ndarray
    rank: int
    basis: np.ndarray

    def __post_init__(self):
        for name in ('matrix', 'basis'):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def width(self):
        return self.matrix.shape[0]

    def complement(self):
        return np.eye(self.width) - self.matrix


def projection_from_directions(directions):
    """
    Projector onto the row span of ``directions`` (c x D).

    The basis comes from QR with column pivoting of W^T; the rank counts the
    pivots above 1e-8 times the largest one.
    """
    W = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if W.ndim != 2:
        raise InputError(f"Directions must be a c x D matrix, got shape {W.shape}.")
    if not np.all(np.isfinite(W)):
        raise InputError("Directions contain non-finite values.")
    if not np.any(W):
        raise DegenerateSubspaceError("All directions are zero; the subspace is empty.")

    q, r, _ = linalg.qr(W.T, mode='economic', pivoting=True)
    pivots = np.abs(np.diag(r))
    rank = int(np.count_nonzero(pivots > RANK_TOLERANCE * pivots[0]))
    basis = q[:, :rank]
    matrix = basis @ basis.T
    matrix = (matrix + matrix.T) / 2
    logger.debug(f"Projector of rank {rank} from {W.shape[0]} directions in width {W.shape[1]}")
    return ProjectionMatrix(matrix, rank, basis)


def split_subspace(x, projector):
    """(P x, x - P x) for a vector or a stack of row vectors."""
    P = np.asarray(getattr(projector, 'matrix', projector))
    x = np.asarray(x)
    if x.shape[-1] != P.shape[0]:
        raise InputError(f"Vector width {x.shape[-1]} does not match projector width {P.shape[0]}.")
    parallel = x @ P.T
    return parallel, x - parallel


def save_projection(projection, path, source=None):
    metadata = {'kind': 'projection', 'rank': projection.rank, 'source': source}
    return write_archive(path, [('projector', projection.matrix), ('basis', projection.basis)], metadata)


def load_projection(path):
    metadata, tensors = read_archive(path)
    if metadata.get('kind') != 'projection' or 'projector' not in tensors:
        raise ArchiveFormatError(f"{path} does not hold a projector.")
    try:
        rank = int(metadata['rank'])
    except (KeyError, TypeError, ValueError):
        raise ArchiveFormatError(f"{path} has no integer projector rank.") from None
    if 'basis' not in tensors:
        raise ArchiveFormatError(f"{path} does not hold a projector basis.")
    return ProjectionMatrix(tensors['projector'], rank, tensors['basis'])


def load_directions(path, layer=None):
    """
    Direction rows from an archive: a ``directions`` tensor, or the weight rows
    of stored probes (restricted to ``layer`` when given).
    """
    metadata, tensors = read_archive(path)
    kind = metadata.get('kind')
    if kind == 'probes':
        probes = [p for p in probes_from_archive(metadata, tensors) if layer is None or p.layer == layer]
        if not probes:
            raise InputError(f"No probes at layer {layer} in {path}.")
        return np.vstack([p.weights for p in probes])
    if 'directions' in tensors:
        return np.atleast_2d(tensors['directions'])
    raise ArchiveFormatError(f"{path} holds neither probes nor a 'directions' tensor.")
