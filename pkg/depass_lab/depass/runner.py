import logging
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from depass_lab.exceptions import ResourceBudgetError
from .init import InitSpec, init_decomposition
from .propagation import (
    apportion, mlp_preactivations, normalize_rule, propagate_attention,
    propagate_mlp, propagate_rmsnorm
)
from .state import (
    DecomposedState, Stage, StatePoint, assert_reconstruction, tolerance_for, trace_state
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DecomposedRun:
    """
    Result of one decomposed pass.

    ``snapshots`` maps a residual index (0..L, as in ForwardTrace.hidden) to
    the components of that residual state.
    """
    initial: DecomposedState
    final: DecomposedState
    final_normed: DecomposedState
    snapshots: dict
    errors: list = field(default_factory=list)
    rule: str = 'softmax'
    spec: InitSpec = None

    @property
    def labels(self):
        return self.initial.labels

    @property
    def kind(self):
        return self.initial.kind

    @property
    def max_error(self):
        return max((error for _, error in self.errors), default=0.0)


def _batches(m, size):
    return [slice(start, min(start + size, m)) for start in range(0, m, size)]


def working_set_elements(n, m, config, mlp_ahead):
    """
    Peak elements held by a decomposed pass: the N x M x D state and its
    stage output, plus the float64 N x M x d_mlp preactivations and shares
    while an MLP stage remains.
    """
    elements = 2 * n * m * config.d_model
    if mlp_ahead:
        elements += 2 * n * m * config.d_mlp
    return elements


def _check_budget(n, m, config, mlp_ahead, budget):
    elements = working_set_elements(n, m, config, mlp_ahead)
    if elements > budget:
        raise ResourceBudgetError(
            f"Decomposed pass over N={n}, M={m} needs {elements} elements, over "
            f"DEPASS_MAX_STATE_ELEMENTS={budget}; group components or shorten the prompt."
        )


class _Runner:
    """Walks the residual stream from the init point to the final norm."""

    def __init__(self, trace, weights, rule, batch, gated_subkey, tolerance, check):
        self.trace = trace
        self.weights = weights
        self.config = weights.config
        self.rule = rule
        self.batch = batch
        self.gated_subkey = gated_subkey
        self.tolerance = tolerance
        self.check = check
        self.errors = []

    def record(self, data, point):
        if self.check:
            error = assert_reconstruction(data.sum(axis=1), trace_state(self.trace, point), point,
                                          self.tolerance)
            self.errors.append((point, error))

    def attention(self, data, layer):
        layer_trace = self.trace.layers[layer]
        layer_weights = self.weights.layers[layer]
        out = np.empty_like(data)
        for part in _batches(data.shape[1], self.batch):
            normed = propagate_rmsnorm(data[:, part], layer_trace.hidden_in, layer_weights.attn_norm,
                                       self.config.norm_eps, scale=layer_trace.rms_scale_attn)
            out[:, part] = propagate_attention(data[:, part], normed, layer_trace.attn_probs,
                                               layer_weights, self.config)
        return out

    def mlp(self, data, layer):
        layer_trace = self.trace.layers[layer]
        layer_weights = self.weights.layers[layer]
        subkeys = self.weights.subkeys(layer, self.gated_subkey)

        def normed(part):
            return propagate_rmsnorm(data[:, part], layer_trace.hidden_attn, layer_weights.mlp_norm,
                                     self.config.norm_eps, scale=layer_trace.rms_scale_mlp)

        # Shares depend on every component, so gather all preactivations first.
        n, m, _ = data.shape
        pre = np.empty((n, m, self.config.d_mlp), dtype=np.float64)
        for part in _batches(m, self.batch):
            pre[:, part] = mlp_preactivations(normed(part), subkeys)
        alpha = apportion(pre, self.rule)

        out = np.empty_like(data)
        subvalues = self.weights.subvalues(layer)
        for part in _batches(m, self.batch):
            out[:, part] = propagate_mlp(data[:, part], alpha[:, part], layer_trace.mlp_activations,
                                         subvalues)
        return out

    def final_norm(self, data):
        return propagate_rmsnorm(data, self.trace.hidden(self.config.num_layers), self.weights.final_norm,
                                 self.config.norm_eps, scale=self.trace.final_scale)


def run_decomposed(trace, weights, spec, rule=None, component_batch=None, snapshot_layers=(),
                   gated_subkey=None, max_state_elements=None, check=True):
    """
    Decompose the traced state at ``spec``'s init point and carry the
    components to the final norm.

    Reconstruction against the trace is asserted after every stage when
    ``check`` is set; drift beyond the precision's tolerance raises
    ConsistencyError.
    """
    config = weights.config
    rule = normalize_rule(rule)
    batch = component_batch or settings.DEPASS_COMPONENT_BATCH
    gated_subkey = gated_subkey or settings.DEPASS_GATED_SUBKEY
    budget = max_state_elements or settings.DEPASS_MAX_STATE_ELEMENTS

    spec = spec.resolve(config, trace.num_positions)
    m = spec.num_components(config)
    _check_budget(trace.num_positions, m, config, spec.mlp_ahead(config), budget)
    initial = init_decomposition(trace, weights, spec)
    runner = _Runner(trace, weights, rule, max(1, int(batch)), gated_subkey,
                     tolerance_for(initial.dtype), check)

    def freeze(data, point):
        return DecomposedState(data.copy(), initial.labels, initial.start_layer, point, initial.kind)

    wanted = set(snapshot_layers)
    snapshots = {}
    data = initial.data
    runner.record(data, initial.point)

    # Resume at the stage right after the init point.
    point = initial.point
    if point.stage is Stage.PRE_ATTENTION:
        layer, pending_mlp = point.layer, False
    elif point.stage is Stage.POST_ATTENTION:
        layer, pending_mlp = point.layer, True
    else:
        layer, pending_mlp = point.layer + 1, False

    if not pending_mlp and layer in wanted:
        snapshots[layer] = freeze(data, StatePoint(layer, Stage.PRE_ATTENTION))

    while layer < config.num_layers:
        if not pending_mlp:
            data = runner.attention(data, layer)
            runner.record(data, StatePoint(layer, Stage.POST_ATTENTION))
        pending_mlp = False
        data = runner.mlp(data, layer)
        runner.record(data, StatePoint(layer, Stage.POST_MLP))
        layer += 1
        if layer in wanted:
            snapshots[layer] = freeze(data, StatePoint(layer, Stage.PRE_ATTENTION))

    final = freeze(data, StatePoint(config.num_layers, Stage.PRE_ATTENTION))
    normed = runner.final_norm(data)
    final_point = StatePoint(config.num_layers, Stage.POST_FINAL_NORM)
    runner.record(normed, final_point)

    run = DecomposedRun(
        initial=initial,
        final=final,
        final_normed=DecomposedState(normed, initial.labels, initial.start_layer, final_point, initial.kind),
        snapshots=snapshots,
        errors=runner.errors,
        rule=rule,
        spec=spec,
    )
    logger.info(
        f"Decomposed run ({initial.kind}, M={m}, rule={rule}) from {initial.point}; "
        f"max reconstruction error {run.max_error:.3e}"
    )
    return run
