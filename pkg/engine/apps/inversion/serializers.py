"""
Serializers for the [inversion] and [counterexample] config sections and
for inversion reports.
"""

import math

from rest_framework import serializers

from apps.coefficients.serializers import ConditionReportSerializer
from apps.density.serializers import split_list
from apps.simulation.serializers import DistanceReportSerializer

from .models import Aggregation, InversionTarget

GRID_TARGETS = (
    InversionTarget.DRIFT_1D,
    InversionTarget.DRIFT_LANGEVIN,
    InversionTarget.BETA_ADDITIVE,
    InversionTarget.BETA_LANGEVIN,
)


GRID_TOLERANCE = 1e-4
SAMPLE_TOLERANCE = 0.1


class DensityInput:
    CLOSED_FORM = 'closed_form'
    GIBBS = 'gibbs'
    SAMPLES = 'samples'
    CHOICES = (CLOSED_FORM, GIBBS, SAMPLES)


class InversionSectionSerializer(serializers.Serializer):
    target = serializers.ChoiceField(choices=GRID_TARGETS)
    density = serializers.ChoiceField(choices=DensityInput.CHOICES, required=False)
    beta = serializers.FloatField(required=False)
    aggregation = serializers.ChoiceField(choices=Aggregation.choices, default=Aggregation.MEDIAN)
    bootstrap = serializers.IntegerField(min_value=0, required=False)
    bandwidth_scale = serializers.FloatField(default=1.0)
    perturbation = serializers.ListField(child=serializers.FloatField(min_value=0.0), required=False)
    tolerance = serializers.FloatField(min_value=0.0, required=False)

    def to_internal_value(self, data):
        data = dict(data)
        if 'perturbation' in data:
            data['perturbation'] = split_list(data['perturbation'])
        return super().to_internal_value(data)

    def validate_beta(self, value):
        if value <= 0:
            raise serializers.ValidationError('beta must be positive')
        return value

    def validate_bandwidth_scale(self, value):
        if value <= 0:
            raise serializers.ValidationError('bandwidth_scale must be positive')
        return value

    def validate(self, attrs):
        target = attrs['target']
        if 'density' not in attrs:
            attrs['density'] = DensityInput.CLOSED_FORM if target == InversionTarget.DRIFT_1D else DensityInput.GIBBS
        if attrs['density'] == DensityInput.SAMPLES and target != InversionTarget.BETA_ADDITIVE:
            raise serializers.ValidationError({'density': 'Sample input is only supported for beta_additive'})
        if attrs['density'] == DensityInput.SAMPLES and attrs.get('perturbation'):
            raise serializers.ValidationError({'perturbation': 'Perturbation runs need a density grid'})
        if 'tolerance' not in attrs:
            attrs['tolerance'] = SAMPLE_TOLERANCE if attrs['density'] == DensityInput.SAMPLES else GRID_TOLERANCE
        return attrs


class CounterexampleSectionSerializer(serializers.Serializer):
    FAMILIES = ('gauge', 'skew')
    REFERENCES = ('none', 'cauchy', 'normal', 'gibbs')

    family = serializers.ChoiceField(choices=FAMILIES)
    anchor = serializers.FloatField(default=0.0)
    offset = serializers.FloatField(default=1.0)
    skew = serializers.ListField(child=serializers.FloatField(), required=False)
    verify = serializers.BooleanField(default=True)
    reference = serializers.ChoiceField(choices=REFERENCES, default='none')
    alpha = serializers.FloatField(default=0.05)

    def to_internal_value(self, data):
        data = dict(data)
        if 'skew' in data:
            data['skew'] = split_list(data['skew'])
        return super().to_internal_value(data)

    def validate_alpha(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError('alpha must lie in (0, 1)')
        return value

    def validate(self, attrs):
        if attrs['family'] == 'skew':
            attrs.setdefault('skew', [1.0])
        return attrs


class InversionReportSerializer(serializers.Serializer):
    """
    JSON view of an InversionReport. Field targets are referenced by the
    file name passed in the `field_file` context entry.
    """
    target = serializers.CharField()
    recovered = serializers.SerializerMethodField()
    field_file = serializers.SerializerMethodField()
    aggregation = serializers.CharField(allow_null=True)
    dispersion = serializers.FloatField()
    masked_fraction = serializers.FloatField()
    admissible_nodes = serializers.IntegerField()
    thresholds = serializers.DictField()
    formula = serializers.CharField()
    per_axis = serializers.ListField(child=serializers.FloatField())
    statistical = serializers.BooleanField()
    bootstrap_dispersion = serializers.FloatField(allow_null=True)

    def get_recovered(self, obj):
        if not obj.is_scalar:
            return None
        return obj.value if math.isfinite(obj.value) else None

    def get_field_file(self, obj):
        return None if obj.is_scalar else self.context.get('field_file')


class GaugeFamilySerializer(serializers.Serializer):
    base = serializers.CharField(source='base.name')
    derived = serializers.CharField(source='derived.name')
    anchor = serializers.FloatField()
    offset = serializers.FloatField()
    constant = serializers.FloatField()
    box = serializers.ListField(child=serializers.FloatField())
    certificate = serializers.FloatField()
    symbolic = serializers.BooleanField()
    derived_expression = serializers.SerializerMethodField()
    flags = serializers.ListField(child=serializers.CharField())
    advisories = ConditionReportSerializer(many=True)

    def get_derived_expression(self, obj):
        return None if obj.derived_expression is None else str(obj.derived_expression)


class NonidentifiabilityReportSerializer(serializers.Serializer):
    pair_names = serializers.ListField(child=serializers.CharField())
    verdict = serializers.CharField()
    distance = DistanceReportSerializer()
    reference_distances = serializers.SerializerMethodField()
    advisories = ConditionReportSerializer(many=True)
    diagnostics = serializers.DictField(child=serializers.ListField(child=serializers.CharField()), read_only=True)

    def get_reference_distances(self, obj):
        return {name: DistanceReportSerializer(report).data for name, report in obj.reference_distances.items()}


class PerturbationResultSerializer(serializers.Serializer):
    noise_levels = serializers.ListField(child=serializers.FloatField())
    errors = serializers.ListField(child=serializers.FloatField(allow_null=True))
    amplification = serializers.ListField(child=serializers.FloatField(allow_null=True))
    seed = serializers.IntegerField()
