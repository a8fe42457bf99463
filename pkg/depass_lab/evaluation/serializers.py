from rest_framework import serializers

from model_io.vocab import tokenize


class ExampleSerializer(serializers.Serializer):
    """
    One dataset line: ``{"tokens": [...], "target": id}`` or, with a
    vocabulary in the context, ``{"text": "...", "target_text": "word"}``.
    """
    tokens = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False,
                                   allow_empty=False)
    target = serializers.IntegerField(min_value=0, required=False)
    text = serializers.CharField(required=False)
    target_text = serializers.CharField(required=False)
    meta = serializers.DictField(required=False, default=dict)

    def validate(self, attrs):
        by_ids = 'tokens' in attrs and 'target' in attrs
        by_text = 'text' in attrs and 'target_text' in attrs
        if by_ids == by_text:
            raise serializers.ValidationError(
                "Give either 'tokens' and 'target' or 'text' and 'target_text'."
            )
        if by_text:
            vocab = self.context.get('vocab')
            if vocab is None:
                raise serializers.ValidationError("Text examples need a vocabulary.")
            target = tokenize(attrs['target_text'], vocab)[1:]
            if len(target) != 1:
                raise serializers.ValidationError("target_text must be a single word.")
            attrs['tokens'] = tokenize(attrs['text'], vocab)
            attrs['target'] = target[0]
        return attrs


class CurveSerializer(serializers.Serializer):
    """JSON form of a faithfulness or masking curve with per-example values."""
    method = serializers.CharField()
    kind = serializers.CharField()
    grid = serializers.ListField()
    means = serializers.ListField(child=serializers.FloatField())
    num_examples = serializers.IntegerField(min_value=0)
    example_ids = serializers.ListField(child=serializers.IntegerField(), required=False)
    per_example = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()),
                                        required=False)
