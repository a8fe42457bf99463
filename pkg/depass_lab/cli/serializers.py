from rest_framework import serializers


class RunManifestSerializer(serializers.Serializer):
    """Sidecar record written next to every command output."""
    command = serializers.CharField()
    flags = serializers.DictField()
    model_fingerprint = serializers.CharField(allow_null=True, required=False)
    inputs = serializers.DictField(child=serializers.CharField())
    version = serializers.CharField()
    wall_time = serializers.FloatField(min_value=0)
