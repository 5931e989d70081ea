"""
Serializers for the run manifest and the [acceptance] config section.
"""

from rest_framework import serializers

from apps.density.serializers import split_list


class CheckSerializer(serializers.Serializer):
    name = serializers.CharField(source='label')
    status = serializers.CharField()
    value = serializers.FloatField(allow_null=True)
    threshold = serializers.FloatField(allow_null=True)
    comparison = serializers.CharField()
    binding = serializers.BooleanField()
    detail = serializers.CharField(allow_blank=True)


class OutputFileSerializer(serializers.Serializer):
    name = serializers.CharField()
    sha256 = serializers.CharField()
    size = serializers.IntegerField()


class AdvisorySerializer(serializers.Serializer):
    category = serializers.CharField()
    message = serializers.CharField()


class RunManifestSerializer(serializers.Serializer):
    command = serializers.CharField()
    run_id = serializers.CharField()
    config_hash = serializers.CharField()
    seed = serializers.IntegerField()
    quick = serializers.BooleanField()
    started_at = serializers.CharField()
    wall_time = serializers.FloatField()
    versions = serializers.DictField(child=serializers.CharField())
    passed = serializers.BooleanField()
    summary = serializers.DictField(child=serializers.IntegerField())
    failed_checks = serializers.ListField(child=serializers.CharField())
    checks = CheckSerializer(many=True)
    advisories = AdvisorySerializer(many=True)
    outputs = OutputFileSerializer(many=True)
    config = serializers.DictField()


class AcceptanceSectionSerializer(serializers.Serializer):
    """
    Criterion selection, seed and tolerance overrides written as
    `<criterion>.<tolerance> = value`. Overrides come back nested:
    validated_data['tolerances'] == {criterion: {tolerance: value}}.
    `stated_runs = true` runs the Cauchy and SPDE criteria at their stated
    run parameters.
    """
    criteria = serializers.ListField(child=serializers.CharField(), required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    stated_runs = serializers.BooleanField(required=False, default=False)

    def __init__(self, *args, tolerances=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.tolerances = tolerances or {}
        for criterion, defaults in self.tolerances.items():
            for name in defaults:
                self.fields[f'{criterion}.{name}'] = serializers.FloatField(
                    min_value=0.0, required=False, source=f'tolerances.{criterion}.{name}',
                )

    def to_internal_value(self, data):
        data = dict(data)
        if 'criteria' in data:
            data['criteria'] = split_list(data['criteria'])
        return super().to_internal_value(data)

    def validate_criteria(self, value):
        unknown = sorted(set(value) - set(self.tolerances))
        if unknown:
            raise serializers.ValidationError(
                f'Unknown criteria {", ".join(unknown)}; known: {", ".join(sorted(self.tolerances))}'
            )
        return value
