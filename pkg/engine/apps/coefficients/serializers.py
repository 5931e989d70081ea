"""
Serializers for coefficient sections of experiment configs and for
condition reports written to run artifacts.
"""

from rest_framework import serializers

from .models import CoefficientKind
from .presets import PRESETS, preset
from .services import CoefficientService


class CoefficientSpecSerializer(serializers.Serializer):
    """
    A coefficient pair: either a registered preset with its parameters,
    or expressions for the drift (or potential) and noise.
    """
    preset = serializers.CharField(required=False)
    kind = serializers.ChoiceField(choices=CoefficientKind.choices, required=False)
    dimension = serializers.IntegerField(min_value=1, default=1)
    drift = serializers.CharField(required=False)
    sigma = serializers.CharField(required=False, default='sqrt(2)')
    potential = serializers.CharField(required=False)
    beta = serializers.FloatField(required=False)
    alpha = serializers.FloatField(required=False)
    heavy_tailed = serializers.BooleanField(required=False, default=False)
    name = serializers.CharField(required=False)

    def validate_preset(self, value):
        if value not in PRESETS:
            raise serializers.ValidationError(f'Unknown preset; known: {", ".join(sorted(PRESETS))}')
        return value

    def validate_beta(self, value):
        if value <= 0:
            raise serializers.ValidationError('beta must be positive')
        return value

    def validate(self, attrs):
        if 'preset' not in attrs and 'drift' not in attrs and 'potential' not in attrs:
            raise serializers.ValidationError('Give a preset, a drift or a potential')
        if 'potential' in attrs and 'beta' not in attrs:
            raise serializers.ValidationError({'beta': 'Required with a potential'})
        return attrs

    def build_pair(self):
        """Construct the CoefficientPair described by the validated data."""
        data = self.validated_data
        if 'preset' in data:
            params = {k: data[k] for k in ('alpha', 'beta') if k in data}
            if data['preset'] == 'gaussian':
                params['dimension'] = data['dimension']
            pair = preset(data['preset'], **params)
            return pair.with_name(data['name']) if 'name' in data else pair
        return CoefficientService.pair_from_expressions(
            drift=data.get('drift'),
            sigma=data.get('sigma', 'sqrt(2)'),
            dimension=data['dimension'],
            kind=data.get('kind'),
            potential=data.get('potential'),
            beta=data.get('beta'),
            name=data.get('name', 'custom'),
            heavy_tailed=data['heavy_tailed'],
        )


class ViolationSerializer(serializers.Serializer):
    condition = serializers.CharField()
    point = serializers.ListField(child=serializers.FloatField())
    value = serializers.FloatField()


class ConditionReportSerializer(serializers.Serializer):
    """Read-only view of a ConditionReport."""
    pair_name = serializers.CharField()
    box = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    n_samples = serializers.IntegerField()
    seed = serializers.IntegerField()
    monotone_constant = serializers.FloatField()
    coercive_constants = serializers.ListField(child=serializers.FloatField())
    growth_constants = serializers.ListField(child=serializers.FloatField())
    growth_exponent = serializers.FloatField()
    min_diffusion_eigenvalue = serializers.FloatField()
    verdict = serializers.CharField()
    failed_conditions = serializers.ListField(child=serializers.CharField())
    violations = ViolationSerializer(many=True)
    label = serializers.CharField()
