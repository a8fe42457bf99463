from rest_framework import serializers

from depass_lab.exceptions import InputError


class SpanField(serializers.ListField):
    child = serializers.IntegerField(min_value=0)

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if len(value) != 2:
            raise serializers.ValidationError("A word span is [start, stop].")
        return tuple(value)


class GroupsFileSerializer(serializers.Serializer):
    """
    Component groups file: either explicit ``groups`` (lists of positions or
    neurons) or token-position ``word_spans`` for word-level grouping.
    """
    groups = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(min_value=0), allow_empty=False),
        required=False,
        allow_empty=False,
    )
    word_spans = serializers.ListField(child=SpanField(), required=False, allow_empty=False)

    def validate(self, attrs):
        if ('groups' in attrs) == ('word_spans' in attrs):
            raise serializers.ValidationError("Give exactly one of 'groups' or 'word_spans'.")
        return attrs


def parse_groups_file(data):
    if isinstance(data, list):
        data = {'groups': data}
    serializer = GroupsFileSerializer(data=data)
    if not serializer.is_valid():
        raise InputError(f"Invalid groups file: {dict(serializer.errors)}")
    return serializer.validated_data
