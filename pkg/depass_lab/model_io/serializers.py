import io
from pathlib import Path

from rest_framework import serializers
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser

from depass_lab.exceptions import ConfigurationError, InputError
from .config import (
    ACTIVATION_CHOICES, MLP_KIND_CHOICES, PRECISION_CHOICES, ModelConfig
)


class ModelConfigSerializer(serializers.Serializer):
    """Validates a model configuration file (JSON object)."""
    num_layers = serializers.IntegerField(min_value=1)
    num_heads = serializers.IntegerField(min_value=1)
    num_kv_heads = serializers.IntegerField(min_value=1, required=False)
    d_model = serializers.IntegerField(min_value=1)
    d_mlp = serializers.IntegerField(min_value=1)
    vocab_size = serializers.IntegerField(min_value=1)
    max_seq_len = serializers.IntegerField(min_value=1)
    mlp_kind = serializers.ChoiceField(choices=MLP_KIND_CHOICES, default='plain')
    activation = serializers.ChoiceField(choices=ACTIVATION_CHOICES, default='gelu')
    rope = serializers.BooleanField(default=False)
    rope_theta = serializers.FloatField(default=10000.0)
    norm_eps = serializers.FloatField(min_value=0.0, default=1e-6)
    numeric_precision = serializers.ChoiceField(choices=PRECISION_CHOICES, default='f32')

    def validate(self, attrs):
        attrs.setdefault('num_kv_heads', attrs['num_heads'])
        if attrs['d_model'] % attrs['num_heads']:
            raise serializers.ValidationError("d_model must be divisible by num_heads.")
        if attrs['num_heads'] % attrs['num_kv_heads']:
            raise serializers.ValidationError("num_kv_heads must divide num_heads.")
        if attrs['rope'] and attrs['rope_theta'] <= 0:
            raise serializers.ValidationError("rope_theta must be positive.")
        return attrs

    def create(self, validated_data):
        return ModelConfig(**validated_data)


def parse_model_config(data):
    """Build a ModelConfig from a decoded JSON object, or raise ConfigurationError."""
    serializer = ModelConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(f"Invalid model config: {dict(serializer.errors)}")
    return serializer.save()


def read_json(path):
    """Decode one JSON document from ``path``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"Cannot read {path}: {exc}") from exc
    try:
        return JSONParser().parse(io.BytesIO(data))
    except ParseError as exc:
        raise InputError(f"{path}: {exc.detail}") from exc


def read_jsonl(path):
    """One decoded JSON value per non-blank line of ``path``."""
    try:
        lines = Path(path).read_bytes().splitlines()
    except OSError as exc:
        raise InputError(f"Cannot read {path}: {exc}") from exc
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(JSONParser().parse(io.BytesIO(line)))
        except ParseError as exc:
            raise InputError(f"{path}:{number}: {exc.detail}") from exc
    return records


def validate_records(records, serializer_class, what='record', context=None):
    """Run ``serializer_class`` over each record; the first failure raises InputError."""
    validated = []
    for number, record in enumerate(records, start=1):
        serializer = serializer_class(data=record, context=context or {})
        if not serializer.is_valid():
            raise InputError(f"Invalid {what} #{number}: {dict(serializer.errors)}")
        validated.append(serializer.validated_data)
    return validated
