import enum
import logging
from dataclasses import dataclass

import numpy as np

from depass_lab.exceptions import ConsistencyError, InputError
from model_io.archive import write_archive

logger = logging.getLogger(__name__)

# Reconstruction tolerance per engine precision.
RECONSTRUCTION_TOLERANCE = {
    np.dtype('<f4'): 1e-4,
    np.dtype('<f8'): 1e-10,
}
RELATIVE_EPS = 1e-12


class Stage(enum.Enum):
    PRE_ATTENTION = 'pre_attention'
    POST_ATTENTION = 'post_attention'
    POST_MLP = 'post_mlp'
    POST_FINAL_NORM = 'post_final_norm'


@dataclass(frozen=True)
class StatePoint:
    layer: int
    stage: Stage

    def __str__(self):
        if self.stage is Stage.POST_FINAL_NORM:
            return 'final_norm'
        return f'layer {self.layer} {self.stage.value}'

    @property
    def residual_index(self):
        """Index into ForwardTrace.hidden() when the point sits on the residual stream."""
        if self.stage is Stage.PRE_ATTENTION:
            return self.layer
        if self.stage is Stage.POST_MLP:
            return self.layer + 1
        return None


def trace_state(trace, point):
    """The full (N, D) hidden state the standard pass recorded at ``point``."""
    if point.stage is Stage.POST_FINAL_NORM:
        return trace.final_normed
    if point.stage is Stage.POST_ATTENTION:
        return trace.layers[point.layer].hidden_attn
    return trace.hidden(point.residual_index)


@dataclass(frozen=True, eq=False)
class DecomposedState:
    """
    N x M x D additive components of the hidden state at ``point``.

    ``data`` is read-only; a state is never edited once built.
    """
    data: np.ndarray
    labels: tuple
    start_layer: int
    point: StatePoint
    kind: str

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] != len(self.labels):
            raise InputError(
                f"Component tensor {self.data.shape} does not match {len(self.labels)} labels."
            )
        self.data.flags.writeable = False

    @property
    def num_components(self):
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def component(self, index):
        return self.data[:, index, :]


def reconstruct(state):
    data = state.data if isinstance(state, DecomposedState) else np.asarray(state)
    return data.sum(axis=1)


def reconstruction_error(components_sum, full_state):
    """max_i ||sum_m c_im - X_i|| / (||X_i|| + eps)."""
    diff = np.linalg.norm(components_sum - full_state, axis=-1)
    scale = np.linalg.norm(full_state, axis=-1) + RELATIVE_EPS
    return float(np.max(diff / scale))


def check_reconstruction(state, trace):
    return reconstruction_error(reconstruct(state), trace_state(trace, state.point))


def tolerance_for(dtype):
    return RECONSTRUCTION_TOLERANCE[np.dtype(dtype)]


def assert_reconstruction(components_sum, full_state, point, tolerance):
    error = reconstruction_error(components_sum, full_state)
    logger.debug(f"Reconstruction error at {point}: {error:.3e}")
    if error > tolerance:
        raise ConsistencyError(
            f"Components drifted from the traced state at {point}: "
            f"relative error {error:.3e} exceeds {tolerance:.1e}."
        )
    return error


def export_state(state, path, extra_metadata=None):
    metadata = {
        'kind': 'decomposed_state',
        'decomposition': state.kind,
        'labels': list(state.labels),
        'start_layer': state.start_layer,
        'point': {'layer': state.point.layer, 'stage': state.point.stage.value},
    }
    metadata.update(extra_metadata or {})
    write_archive(path, [('components', state.data)], metadata)
