"""
Serializers for the [spde] config section and SPDE reports.
"""

from rest_framework import serializers

from apps.coefficients.serializers import ViolationSerializer
from apps.density.serializers import split_list

from .models import SpdeConfig, TimeScheme
from .presets import REACTIONS, reaction, reaction_from_expression


class SpdeSectionSerializer(serializers.Serializer):
    """
    Galerkin run options. Time stepping and chain counts come from the
    [simulation] section; the reaction is a registered name or an
    expression in u.
    """
    reaction = serializers.CharField(default='linear')
    potential = serializers.CharField(required=False)
    alpha = serializers.FloatField(required=False)
    n_modes = serializers.IntegerField(min_value=1, max_value=256, default=16)
    beta = serializers.FloatField(default=2.0)
    scheme = serializers.ChoiceField(choices=TimeScheme.choices, default=TimeScheme.SEMI_IMPLICIT)
    quadrature_nodes = serializers.IntegerField(min_value=3, required=False)
    invert_modes = serializers.IntegerField(min_value=1, default=4)
    bandwidth_scale = serializers.FloatField(min_value=0.01, default=1.0)
    section_modes = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=1, max_length=3, required=False,
    )
    section_half_width = serializers.FloatField(default=1.0)
    section_nodes = serializers.IntegerField(min_value=7, default=41)
    partition_samples = serializers.IntegerField(min_value=0, default=0)
    snapshots = serializers.IntegerField(min_value=0, default=4)
    variance_modes = serializers.IntegerField(min_value=1, default=8)
    variance_tolerance = serializers.FloatField(min_value=0.0, default=0.05)
    trace_tolerance = serializers.FloatField(min_value=0.0, default=0.05)
    beta_tolerance = serializers.FloatField(min_value=0.0, default=0.1)

    def to_internal_value(self, data):
        data = dict(data)
        if 'section_modes' in data:
            data['section_modes'] = split_list(data['section_modes'])
        return super().to_internal_value(data)

    def validate_beta(self, value):
        if value <= 0:
            raise serializers.ValidationError('beta must be positive')
        return value

    def validate_quadrature_nodes(self, value):
        if value % 2 == 0:
            raise serializers.ValidationError('Quadrature node count must be odd')
        return value

    def validate_section_half_width(self, value):
        if value <= 0:
            raise serializers.ValidationError('section_half_width must be positive')
        return value

    def validate(self, attrs):
        if 'potential' not in attrs and attrs['reaction'] not in REACTIONS:
            raise serializers.ValidationError(
                {'reaction': f'Unknown reaction; known: {", ".join(sorted(REACTIONS))}, or give a potential'}
            )
        if 'alpha' in attrs and attrs['reaction'] != 'linear':
            raise serializers.ValidationError({'alpha': 'Only the linear reaction takes alpha'})
        modes = attrs.get('section_modes', [])
        if modes and max(modes) > attrs['n_modes']:
            raise serializers.ValidationError({'section_modes': f'Modes must lie in 1..{attrs["n_modes"]}'})
        return attrs

    def build_reaction(self):
        data = self.validated_data
        if 'potential' in data:
            name = data['reaction'] if data['reaction'] not in REACTIONS else 'custom'
            return reaction_from_expression(data['potential'], name=name)
        params = {'alpha': data['alpha']} if 'alpha' in data else {}
        return reaction(data['reaction'], **params)

    def build_config(self, sim):
        """SpdeConfig from this section and a validated SimConfig."""
        data = self.validated_data
        return SpdeConfig(
            reaction=self.build_reaction(),
            n_modes=data['n_modes'],
            dt=sim.dt,
            n_steps=sim.n_steps,
            n_chains=sim.n_chains,
            burn_in_fraction=sim.burn_in_fraction,
            thinning=sim.thinning,
            seed=sim.seed,
            beta=data['beta'],
            quadrature_nodes=data.get('quadrature_nodes'),
            scheme=data['scheme'],
            x0=sim.x0,
        )


class ModeStatisticsSerializer(serializers.Serializer):
    n_modes = serializers.IntegerField()
    beta = serializers.FloatField()
    alpha = serializers.FloatField()
    variances = serializers.ListField(child=serializers.FloatField())
    expected = serializers.ListField(child=serializers.FloatField())
    relative_errors = serializers.ListField(child=serializers.FloatField())
    trace = serializers.FloatField()
    truncated_trace = serializers.FloatField()
    series_trace = serializers.FloatField()
    trace_error = serializers.FloatField()
    max_cross_correlation = serializers.FloatField()
    correlation_bound = serializers.FloatField()
    decoupled = serializers.BooleanField()
    ess = serializers.FloatField()


class PartitionEstimateSerializer(serializers.Serializer):
    log_z = serializers.FloatField()
    partial_log_means = serializers.ListField(child=serializers.FloatField())
    checkpoints = serializers.ListField(child=serializers.IntegerField())
    weight_ess_fraction = serializers.FloatField()
    n_samples = serializers.IntegerField()
    seed = serializers.IntegerField()
    divergent = serializers.BooleanField()


class ReactionConditionReportSerializer(serializers.Serializer):
    reaction_name = serializers.CharField()
    box = serializers.ListField(child=serializers.FloatField())
    n_samples = serializers.IntegerField()
    seed = serializers.IntegerField()
    first_eigenvalue = serializers.FloatField()
    monotone_constant = serializers.FloatField()
    coercive_constants = serializers.ListField(child=serializers.FloatField())
    growth_constants = serializers.ListField(child=serializers.FloatField())
    growth_exponent = serializers.FloatField()
    verdict = serializers.CharField()
    failed_conditions = serializers.ListField(child=serializers.CharField())
    violations = ViolationSerializer(many=True)
    label = serializers.CharField()
