"""
Serializers for the [simulation] config section and simulation reports.
"""

import numpy as np
from rest_framework import serializers

from .models import InitialState, SimConfig


class SimConfigSerializer(serializers.Serializer):
    dt = serializers.FloatField()
    n_steps = serializers.IntegerField(min_value=1)
    n_chains = serializers.IntegerField(min_value=1, default=1)
    burn_in_fraction = serializers.FloatField(min_value=0.0, max_value=0.99, default=0.5)
    thinning = serializers.IntegerField(min_value=1, default=1)
    seed = serializers.IntegerField(min_value=0, required=False)
    x0 = serializers.CharField(default=InitialState.ORIGIN)

    def validate_dt(self, value):
        if value <= 0:
            raise serializers.ValidationError('dt must be positive')
        return value

    def validate_x0(self, value):
        if value in InitialState.values:
            return value
        try:
            return tuple(float(v) for v in value.split(','))
        except ValueError:
            raise serializers.ValidationError(
                f'Use one of {", ".join(InitialState.values)} or comma-separated coordinates'
            )

    def build_config(self, default_seed=0):
        data = dict(self.validated_data)
        data.setdefault('seed', default_seed)
        return SimConfig(**data)


class SamplingSectionSerializer(serializers.Serializer):
    """Estimation and comparison options of a simulate run."""
    estimator = serializers.ChoiceField(choices=['kde', 'histogram'], default='kde')
    bandwidth_scale = serializers.FloatField(min_value=0.01, default=1.0)
    alpha = serializers.FloatField(min_value=1e-6, max_value=0.5, default=0.05)
    write_samples = serializers.BooleanField(default=True)


class EmpiricalMeasureSummarySerializer(serializers.Serializer):
    size = serializers.IntegerField()
    n_chains = serializers.IntegerField()
    dimension = serializers.IntegerField()
    seed = serializers.IntegerField(allow_null=True)
    ess = serializers.FloatField()
    ess_per_axis = serializers.ListField(child=serializers.FloatField())
    mean = serializers.SerializerMethodField()
    quartiles = serializers.SerializerMethodField()
    metadata = serializers.DictField()

    def get_mean(self, obj):
        return obj.samples.mean(axis=0).tolist()

    def get_quartiles(self, obj):
        return np.percentile(obj.samples, [25, 50, 75], axis=0).T.tolist()


class DistanceReportSerializer(serializers.Serializer):
    ks = serializers.FloatField()
    wasserstein1 = serializers.FloatField(allow_null=True)
    n1 = serializers.IntegerField()
    n2 = serializers.IntegerField(allow_null=True)
    ess1 = serializers.FloatField()
    ess2 = serializers.FloatField(allow_null=True)
    threshold = serializers.FloatField()
    indistinguishable = serializers.BooleanField()
    reference = serializers.CharField()
    ks_per_axis = serializers.ListField(child=serializers.FloatField())
    ks_projections = serializers.ListField(child=serializers.FloatField())
