import csv
import io
from dataclasses import dataclass

import numpy as np
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer

from depass_lab.exceptions import AttributionError, ConsistencyError, InputError, UsageError
from .scores import (
    DEPASS, DEPASS_ABS, component_importance, direction_attribution, normalize_scores,
    snapshot_at, target_direction
)
from .serializers import AttributionReportSerializer

SHADES = ' ░▒▓█'
REPORT_FORMATS = ('json', 'csv')
# Relative gap allowed between summed scores and the traced value.
COMPLETENESS_TOLERANCE = {
    np.dtype('<f4'): 1e-4,
    np.dtype('<f8'): 1e-8,
}


@dataclass(frozen=True, eq=False)
class Target:
    kind: str
    token_id: int = None
    layer: int = None
    vector: np.ndarray = None
    name: str = None

    @classmethod
    def logit(cls, token_id):
        return cls('logit', token_id=int(token_id))

    @classmethod
    def direction(cls, layer, vector, name=None):
        return cls('direction', layer=int(layer), vector=np.asarray(vector), name=name)

    def __str__(self):
        if self.kind == 'logit':
            return f'logit:{self.token_id}'
        return f'direction:{self.name or "vector"}@{self.layer}'


@dataclass(frozen=True, eq=False)
class AttributionReport:
    target: Target
    method: str
    model_fingerprint: str
    decomposition: str
    rule: str
    position: int
    labels: tuple
    token_ids: tuple
    scores: np.ndarray
    normalized_scores: np.ndarray

    @property
    def score_rows(self):
        """Scores as (positions, M) with the position index of each row."""
        if self.position is None:
            return list(enumerate(np.atleast_2d(self.scores)))
        return [(self.position, self.scores)]


def _resolve_position(position, num_positions):
    if position == 'all' or position is None:
        return None
    if position == 'last':
        return num_positions - 1
    position = int(position)
    if not 0 <= position < num_positions:
        raise InputError(f"Position {position} outside 0..{num_positions - 1}.")
    return position


def build_report(run, trace, weights, target, method=DEPASS, position='last'):
    """
    Score ``run`` against a logit or direction target. ``position`` is
    'last' (the next-token query), 'all', or an index.
    """
    if trace.model_fingerprint != weights.fingerprint:
        raise AttributionError("Trace was produced by a different model than the one given.")
    if target.kind == 'logit':
        scores = component_importance(run, method, target_direction(weights, target.token_id), trace)
    elif method in (DEPASS, DEPASS_ABS):
        scores = direction_attribution(snapshot_at(run, target.layer), target.vector)
        if method == DEPASS_ABS:
            scores = np.abs(scores)
    else:
        raise UsageError(f"Direction targets support depass and depass_abs, not {method}.")

    index = _resolve_position(position, trace.num_positions)
    scores = np.asarray(scores, dtype=np.float64)
    if index is not None:
        scores = scores[index]
    return AttributionReport(
        target=target,
        method=method,
        model_fingerprint=weights.fingerprint,
        decomposition=run.kind,
        rule=run.rule,
        position=index,
        labels=tuple(run.labels),
        token_ids=tuple(trace.tokens),
        scores=scores,
        normalized_scores=normalize_scores(scores),
    )


def report_to_dict(report):
    return AttributionReportSerializer(report).data


def export_report(report, fmt='json'):
    if fmt == 'json':
        return JSONRenderer().render(report_to_dict(report))
    if fmt == 'csv':
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['position', 'token_id', 'component', 'label', 'score', 'normalized_score'])
        normalized = np.atleast_2d(report.normalized_scores)
        for (position, row), norm_row in zip(report.score_rows, normalized):
            for m, score in enumerate(row):
                writer.writerow([position, report.token_ids[position], m, report.labels[m],
                                 repr(float(score)), repr(float(norm_row[m]))])
        return buffer.getvalue().encode('utf-8')
    raise UsageError(f"Unknown report format {fmt!r}; choose from {', '.join(REPORT_FORMATS)}.")


def parse_report(data):
    """Inverse of the JSON export; validation failures raise InputError."""
    try:
        payload = JSONParser().parse(io.BytesIO(data))
    except ParseError as exc:
        raise InputError(f"Report is not valid JSON: {exc.detail}") from exc
    serializer = AttributionReportSerializer(data=payload)
    if not serializer.is_valid():
        raise InputError(f"Invalid attribution report: {dict(serializer.errors)}")
    attrs = serializer.validated_data
    target = Target(**attrs['target'])
    return AttributionReport(
        target=target,
        method=attrs['method'],
        model_fingerprint=attrs['model_fingerprint'],
        decomposition=attrs['decomposition'],
        rule=attrs['rule'],
        position=attrs['position'],
        labels=tuple(attrs['labels']),
        token_ids=tuple(attrs['token_ids']),
        scores=attrs['scores'],
        normalized_scores=attrs['normalized_scores'],
    )


def shade_levels(scores, levels=len(SHADES)):
    """Bucket scores into ``levels`` quantile bands, 0 = lowest."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    edges = np.quantile(scores, np.linspace(0, 1, levels + 1)[1:-1])
    return np.digitize(scores, edges, right=True)


def render_heatmap_text(report, vocab=None):
    """Aligned UTF-8 table: one row per component, shaded by quantile of its score."""
    def token_text(token_id):
        return vocab.tokens[token_id] if vocab is not None else str(token_id)

    width = max(len(label) for label in report.labels)
    lines = [f'{report.method} scores for {report.target} ({report.decomposition}, {report.rule})']
    if report.position is not None:
        levels = shade_levels(report.scores)
        lines.append(f'position {report.position} token {token_text(report.token_ids[report.position])}')
        for label, score, level in zip(report.labels, report.scores, levels):
            lines.append(f'{label:<{width}}  {score:+.6f}  {SHADES[level] * 8}|')
        return '\n'.join(lines) + '\n'

    scores = np.atleast_2d(report.scores)
    levels = shade_levels(scores).reshape(scores.shape)
    cell = max(len(token_text(t)) for t in report.token_ids)
    header = ' ' * width + '  ' + ' '.join(f'{token_text(t):>{cell}}' for t in report.token_ids)
    lines.append(header)
    for m, label in enumerate(report.labels):
        row = ' '.join(SHADES[levels[i, m]] * cell for i in range(scores.shape[0]))
        lines.append(f'{label:<{width}}  {row}')
    return '\n'.join(lines) + '\n'


def check_completeness(report, trace, tolerance=None):
    """
    Raise ConsistencyError unless the raw scores at each reported position
    add up to the traced logit (or direction activation) within
    ``tolerance * max(|value|, 1)``. Returns the worst relative gap.
    """
    if report.method != DEPASS:
        raise UsageError(f"Completeness only holds for signed depass scores, not {report.method}.")
    if tolerance is None:
        tolerance = COMPLETENESS_TOLERANCE[np.dtype(trace.logits.dtype)]
    worst = 0.0
    for position, row in report.score_rows:
        if report.target.kind == 'logit':
            expected = float(trace.logits[position, report.target.token_id])
        else:
            expected = float(trace.hidden(report.target.layer)[position] @ report.target.vector)
        gap = abs(float(np.sum(row)) - expected) / max(abs(expected), 1.0)
        if gap > tolerance:
            raise ConsistencyError(
                f"Scores at position {position} sum to {float(np.sum(row)):.6g}, expected {expected:.6g}."
            )
        worst = max(worst, gap)
    return worst
