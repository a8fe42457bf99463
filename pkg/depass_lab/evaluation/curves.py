import csv
import io
from dataclasses import dataclass

import numpy as np
from rest_framework.renderers import JSONRenderer

from depass_lab.exceptions import UsageError
from .serializers import CurveSerializer

CURVE_FORMATS = ('csv', 'json')


@dataclass(frozen=True, eq=False)
class Curve:
    """
    Mean metric per grid point for one method and protocol kind: Δp per K
    for faithfulness, accuracy per k for masking, accuracy per setting for
    subspace masking. ``per_example`` rows follow ``example_ids``.
    """
    method: str
    kind: str
    grid: tuple
    means: np.ndarray
    per_example: np.ndarray
    example_ids: tuple

    @property
    def num_examples(self):
        return len(self.example_ids)


def curve_from_rows(method, kind, grid, rows, example_ids):
    per_example = np.array(rows, dtype=np.float64).reshape(len(example_ids), len(grid))
    return Curve(method, kind, tuple(grid), per_example.mean(axis=0), per_example, tuple(example_ids))


def curve_to_dict(curve):
    return CurveSerializer({
        'method': curve.method,
        'kind': curve.kind,
        'grid': list(curve.grid),
        'means': curve.means.tolist(),
        'num_examples': curve.num_examples,
        'example_ids': list(curve.example_ids),
        'per_example': curve.per_example.tolist(),
    }).data


def export_curves(curves, fmt='csv'):
    """CSV rows (method, kind, K_or_k, mean_metric, n_examples) or JSON with per-example values."""
    if fmt == 'json':
        return JSONRenderer().render([curve_to_dict(curve) for curve in curves])
    if fmt == 'csv':
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['method', 'kind', 'K_or_k', 'mean_metric', 'n_examples'])
        for curve in curves:
            for point, mean in zip(curve.grid, curve.means):
                writer.writerow([curve.method, curve.kind, point, repr(float(mean)), curve.num_examples])
        return buffer.getvalue().encode('utf-8')
    raise UsageError(f"Unknown curve format {fmt!r}; choose from {', '.join(CURVE_FORMATS)}.")
