import numpy as np
from rest_framework import serializers

from evaluation.baselines import BASELINE_METHODS
from .scores import IMPORTANCE_METHODS


class ScoreArrayField(serializers.Field):
    """A vector or matrix of floats, held as a numpy array."""

    def to_representation(self, value):
        return np.asarray(value, dtype=np.float64).tolist()

    def to_internal_value(self, data):
        try:
            array = np.asarray(data, dtype=np.float64)
        except (TypeError, ValueError):
            raise serializers.ValidationError("Expected a list (or list of lists) of numbers.")
        if array.ndim not in (1, 2):
            raise serializers.ValidationError("Scores must be a vector or a matrix.")
        if not np.all(np.isfinite(array)):
            raise serializers.ValidationError("Scores must be finite.")
        return array


class TargetSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=['logit', 'direction'])
    token_id = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    layer = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    name = serializers.CharField(required=False, allow_blank=True, allow_null=True)

    def validate(self, attrs):
        if attrs['kind'] == 'logit' and attrs.get('token_id') is None:
            raise serializers.ValidationError("A logit target needs token_id.")
        if attrs['kind'] == 'direction' and attrs.get('layer') is None:
            raise serializers.ValidationError("A direction target needs layer.")
        return attrs


class AttributionReportSerializer(serializers.Serializer):
    """JSON schema of an exported attribution report."""
    target = TargetSerializer()
    method = serializers.ChoiceField(choices=list(IMPORTANCE_METHODS) + list(BASELINE_METHODS))
    model_fingerprint = serializers.CharField()
    decomposition = serializers.CharField()
    rule = serializers.CharField(allow_blank=True)
    position = serializers.IntegerField(allow_null=True)
    labels = serializers.ListField(child=serializers.CharField())
    token_ids = serializers.ListField(child=serializers.IntegerField(min_value=0))
    scores = ScoreArrayField()
    normalized_scores = ScoreArrayField()

    def validate(self, attrs):
        scores = attrs['scores']
        if scores.shape[-1] != len(attrs['labels']):
            raise serializers.ValidationError("Score columns do not match labels.")
        if attrs['normalized_scores'].shape != scores.shape:
            raise serializers.ValidationError("normalized_scores and scores differ in shape.")
        if (attrs['position'] is None) != (scores.ndim == 2):
            raise serializers.ValidationError("Per-position scores need position = null.")
        return attrs
