"""
Serializers for density config sections, grid headers and residual reports.
"""

from rest_framework import serializers

from .models import DensitySource


class GridSpecSerializer(serializers.Serializer):
    """Box and node counts of a uniform grid; bounds are comma-separated."""
    lower = serializers.ListField(child=serializers.FloatField(), min_length=1, max_length=3)
    upper = serializers.ListField(child=serializers.FloatField(), min_length=1, max_length=3)
    nodes = serializers.ListField(child=serializers.IntegerField(min_value=9), min_length=1, max_length=3)

    def to_internal_value(self, data):
        data = {key: split_list(value) if key in ('lower', 'upper', 'nodes') else value for key, value in data.items()}
        return super().to_internal_value(data)

    def validate(self, attrs):
        d = len(attrs['lower'])
        if len(attrs['upper']) != d:
            raise serializers.ValidationError({'upper': f'Expected {d} bounds'})
        if len(attrs['nodes']) == 1:
            attrs['nodes'] = attrs['nodes'] * d
        if len(attrs['nodes']) != d:
            raise serializers.ValidationError({'nodes': f'Expected 1 or {d} node counts'})
        for n in attrs['nodes']:
            if n % 2 == 0:
                raise serializers.ValidationError({'nodes': 'Node counts must be odd'})
        for lo, hi in zip(attrs['lower'], attrs['upper']):
            if not lo < hi:
                raise serializers.ValidationError({'upper': 'Each upper bound must exceed its lower bound'})
        return attrs

    @property
    def box(self):
        return self.validated_data['lower'], self.validated_data['upper']


class DensitySectionSerializer(GridSpecSerializer):
    method = serializers.ChoiceField(
        choices=[DensitySource.CLOSED_FORM, DensitySource.GIBBS], default=DensitySource.CLOSED_FORM,
    )
    allow_heavy_tail = serializers.BooleanField(required=False, allow_null=True, default=None)
    residual = serializers.BooleanField(default=True)


class DensityGridHeaderSerializer(serializers.Serializer):
    """JSON header stored next to a grid CSV."""
    dimension = serializers.IntegerField()
    lower = serializers.ListField(child=serializers.FloatField())
    upper = serializers.ListField(child=serializers.FloatField())
    shape = serializers.ListField(child=serializers.IntegerField())
    spacing = serializers.ListField(child=serializers.FloatField())
    mass = serializers.FloatField()
    tail_mass = serializers.FloatField()
    tails = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    normalized = serializers.BooleanField()
    log_normalizer = serializers.FloatField(allow_null=True)
    source = serializers.CharField()


class NormalizationSerializer(serializers.Serializer):
    constant = serializers.FloatField()
    tail_estimate = serializers.FloatField()
    total = serializers.FloatField()
    heavy_tail = serializers.BooleanField()


class ResidualReportSerializer(serializers.Serializer):
    linf = serializers.FloatField()
    l2 = serializers.FloatField()
    weak_max = serializers.FloatField()
    weak_form_values = serializers.SerializerMethodField()
    interior_margin = serializers.IntegerField()
    masked_nodes = serializers.IntegerField()

    def get_weak_form_values(self, obj):
        return [{'id': name, 'value': float(value)} for name, value in obj.weak_form_values]


def split_list(value):
    """Comma-separated config value as a list."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value
