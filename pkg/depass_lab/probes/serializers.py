from pathlib import Path

import numpy as np
from rest_framework import serializers

from depass_lab.exceptions import InputError
from model_io.serializers import read_jsonl, validate_records
from transformer.trace import load_trace


class FeatureRefSerializer(serializers.Serializer):
    """Points at a hidden state inside an exported trace archive."""
    trace = serializers.CharField()
    layer = serializers.IntegerField(min_value=0)
    position = serializers.IntegerField(default=-1)


class FeatureRecordSerializer(serializers.Serializer):
    """
    One probe training example: an inline ``features`` vector or a
    ``features_ref`` into a trace, a class ``label``, and optionally the
    residual ``layer`` the probe belongs to.
    """
    features = serializers.ListField(child=serializers.FloatField(), required=False, allow_empty=False)
    features_ref = FeatureRefSerializer(required=False)
    label = serializers.IntegerField(min_value=0)
    layer = serializers.IntegerField(min_value=0, required=False, allow_null=True)

    def validate(self, attrs):
        if ('features' in attrs) == ('features_ref' in attrs):
            raise serializers.ValidationError("Give exactly one of 'features' or 'features_ref'.")
        ref = attrs.get('features_ref')
        if ref is not None and attrs.get('layer') is None:
            attrs['layer'] = ref['layer']
        return attrs


def load_feature_dataset(path):
    """
    Read a features JSONL file into ``{layer: (features K x D, labels K)}``.
    Records without a layer go under ``None``; trace paths resolve against
    the JSONL file's directory.
    """
    base = Path(path).resolve().parent
    records = validate_records(read_jsonl(path), FeatureRecordSerializer, 'feature record')
    if not records:
        raise InputError(f"{path} holds no feature records.")

    traces = {}
    grouped = {}
    for record in records:
        ref = record.get('features_ref')
        if ref is None:
            vector = np.asarray(record['features'], dtype=np.float64)
        else:
            trace_path = base / ref['trace']
            if trace_path not in traces:
                traces[trace_path] = load_trace(trace_path)
            hidden = traces[trace_path].hidden(ref['layer'])
            try:
                vector = np.asarray(hidden[ref['position']], dtype=np.float64)
            except IndexError:
                raise InputError(f"Position {ref['position']} outside trace {ref['trace']}.") from None
        grouped.setdefault(record.get('layer'), []).append((vector, record['label']))

    dataset = {}
    for layer, rows in grouped.items():
        widths = {vector.shape for vector, _ in rows}
        if len(widths) != 1:
            raise InputError(f"Feature vectors for layer {layer} differ in width: {sorted(widths)}.")
        dataset[layer] = (np.stack([v for v, _ in rows]), np.asarray([label for _, label in rows]))
    return dataset
