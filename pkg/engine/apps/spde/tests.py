import math

import numpy as np
import pandas as pd
import pytest

from apps.inversion.models import InversionTarget
from apps.simulation.models import EmpiricalMeasure, InitialState
from apps.simulation.serializers import SimConfigSerializer
from core.utils.exceptions import (
    CoefficientSpecError,
    ConfigError,
    DivergenceError,
    InsufficientSupportError,
    IntegrabilityWarning,
    NumericalDomainError,
    QuadratureResolutionWarning,
)

from .factories import SpdeConfigFactory
from .models import SpatialQuadrature, SpectralState, TimeScheme, eigenvalues
from .presets import allen_cahn, free, linear, reaction, reaction_from_expression
from .serializers import ModeStatisticsSerializer, SpdeSectionSerializer
from .services import SPDEInversionService, SPDEService, SPDEStatisticsService


def gaussian_modes(n_modes, beta, alpha=1.0, size=200_000, seed=0):
    """Independent draws from the Gibbs law of the linear reaction."""
    scale = np.sqrt(beta / (2.0 * (eigenvalues(n_modes) + alpha)))
    draws = np.random.default_rng(seed).standard_normal((size, n_modes)) * scale
    return EmpiricalMeasure.from_samples(draws, seed=seed)


@pytest.fixture(scope='module')
def linear_measure():
    return SPDEService.sample_spde(SpdeConfigFactory(seed=31))


@pytest.mark.unit
class TestSpectralBasis:
    def test_state_vanishes_on_the_boundary(self):
        state = SpectralState([0.3, -1.2, 0.7])
        values = state.evaluate(np.array([0.0, 0.5, 1.0]))
        assert values[0] == 0.0 and values[2] == 0.0
        assert values[1] == pytest.approx(math.sqrt(2) * (0.3 - 0.7))

    def test_eigenvalues(self):
        np.testing.assert_allclose(eigenvalues(3), [np.pi ** 2, 4 * np.pi ** 2, 9 * np.pi ** 2])

    def test_quadrature_is_orthonormal_on_the_modes(self):
        quadrature = SpatialQuadrature(16)
        assert quadrature.nodes == 65
        gram = quadrature.project(quadrature.field(np.eye(16)))
        np.testing.assert_allclose(gram, np.eye(16), atol=1e-12)

    def test_coarse_quadrature_warns(self):
        with pytest.warns(QuadratureResolutionWarning):
            SpatialQuadrature(16, nodes=21)

    def test_even_node_count_is_rejected(self):
        with pytest.raises(ConfigError):
            SpatialQuadrature(4, nodes=20)


@pytest.mark.unit
class TestReactions:
    def test_linear_derivative(self):
        np.testing.assert_allclose(linear(alpha=2.0).derivative(np.array([1.0, -0.5])), [-2.0, 1.0])

    def test_free_reaction_broadcasts(self):
        assert free().derivative(np.ones((3, 4))).shape == (3, 4)

    def test_allen_cahn_is_bounded_above(self):
        assert allen_cahn().bounded_above
        assert not reaction_from_expression('u**4').bounded_above

    def test_unknown_reaction(self):
        with pytest.raises(ConfigError):
            reaction('sine_gordon')

    def test_unknown_symbol(self):
        with pytest.raises(CoefficientSpecError):
            reaction_from_expression('u + v')


@pytest.mark.unit
class TestGibbsLogRatio:
    def test_free_field_is_the_reference(self):
        states = np.random.default_rng(0).standard_normal((10, 8))
        np.testing.assert_array_equal(SPDEStatisticsService.gibbs_log_ratio(states, free(), 2.0), np.zeros(10))

    @pytest.mark.parametrize('amplitude', [0.5, -1.3, 2.0])
    def test_single_mode_quadratic(self, amplitude):
        state = SpectralState.single_mode(1, amplitude, 8)
        assert SPDEStatisticsService.gibbs_log_ratio(
            state, linear(), 2.0,
        ) == pytest.approx(-amplitude ** 2 / 2.0, abs=1e-12)
        assert SPDEStatisticsService.gibbs_log_ratio(
            state, linear(), 0.5,
        ) == pytest.approx(-amplitude ** 2 / 0.5, abs=1e-12)

    @pytest.mark.parametrize('c', [0.5, 2.0, 10.0])
    def test_scale_invariance(self, c):
        states = 0.5 * np.random.default_rng(1).standard_normal((50, 16))
        base = SPDEStatisticsService.gibbs_log_ratio(states, allen_cahn(), 2.0)
        scaled = SPDEStatisticsService.gibbs_log_ratio(states, allen_cahn().scaled(c), 2.0 * c)
        assert np.max(np.abs(base - scaled)) <= 1e-12


@pytest.mark.unit
class TestPartitionFunction:
    def test_free_field(self):
        estimate = SPDEStatisticsService.partition_function(free(), 2.0, n_modes=8, n_samples=1000)
        assert estimate.log_z == pytest.approx(0.0, abs=1e-12)
        assert estimate.weight_ess_fraction == pytest.approx(1.0)

    def test_linear_reaction_matches_gaussian_ratio(self):
        lam = eigenvalues(8)
        exact = 0.5 * float(np.sum(np.log(lam / (lam + 1.0))))
        estimate = SPDEStatisticsService.partition_function(linear(), 2.0, n_modes=8, n_samples=100_000, seed=3)
        assert estimate.log_z == pytest.approx(exact, abs=0.01)
        assert not estimate.divergent

    def test_bounded_potential_stabilizes(self):
        estimate = SPDEStatisticsService.partition_function(allen_cahn(), 2.0, n_modes=8, n_samples=50_000, seed=4)
        assert np.isfinite(estimate.log_z)
        assert abs(estimate.partial_log_means[-1] - estimate.partial_log_means[-2]) < 0.01

    def test_non_integrable_weights_warn(self):
        with pytest.warns(IntegrabilityWarning):
            estimate = SPDEStatisticsService.partition_function(
                reaction_from_expression('6*u**2'), 2.0, n_modes=4, n_samples=100_000,
            )
        assert estimate.divergent


@pytest.mark.unit
class TestSeriesTrace:
    def test_free_field_is_one_sixth(self):
        assert SPDEStatisticsService.series_trace(2.0) == pytest.approx(1.0 / 6.0)

    @pytest.mark.parametrize('alpha', [1.0, -1.0, 5.0])
    def test_matches_partial_sums(self, alpha):
        direct = float(np.sum(1.0 / (eigenvalues(200_000) + alpha)))
        assert SPDEStatisticsService.series_trace(2.0, alpha) == pytest.approx(direct, abs=1e-5)

    def test_rejects_unstable_rate(self):
        with pytest.raises(NumericalDomainError):
            SPDEStatisticsService.series_trace(2.0, -10.0)


@pytest.mark.unit
class TestReactionConditions:
    def test_linear_reaction_is_coercive(self):
        report = SPDEStatisticsService.check_reaction_conditions(linear())
        assert report.verdict == 'pass'
        assert report.coercive_constants[1] == pytest.approx(np.pi ** 2 + 1.0)
        assert report.growth_exponent == pytest.approx(1.0)

    def test_free_field_fails_the_strict_coercivity(self):
        report = SPDEStatisticsService.check_reaction_conditions(free())
        assert report.failed_conditions == ['coe']
        assert report.label == 'sampled, not proven'

    def test_allen_cahn_growth(self):
        report = SPDEStatisticsService.check_reaction_conditions(allen_cahn())
        assert report.verdict == 'pass'
        assert 3.0 <= report.growth_exponent <= 3.5


@pytest.mark.unit
class TestSimulation:
    def test_linear_mode_variances(self, linear_measure):
        stats = SPDEStatisticsService.mode_statistics(linear_measure, beta=2.0, alpha=1.0)
        assert stats.expected[0] == pytest.approx(1.0 / (np.pi ** 2 + 1.0))
        assert stats.max_relative_error(4) <= 0.1

    def test_linear_modes_decouple(self, linear_measure):
        stats = SPDEStatisticsService.mode_statistics(linear_measure, beta=2.0, alpha=1.0)
        assert stats.decoupled

    def test_free_field_trace(self):
        cfg = SpdeConfigFactory(reaction=free(), n_modes=32, seed=32)
        stats = SPDEStatisticsService.mode_statistics(SPDEService.sample_spde(cfg), beta=2.0)
        assert stats.trace == pytest.approx(1.0 / 6.0, rel=0.1)
        np.testing.assert_allclose(stats.variances[:4], 1.0 / (np.arange(1, 5) * np.pi) ** 2, rtol=0.15)

    def test_semi_implicit_variance_of_the_first_mode(self):
        cfg = SpdeConfigFactory(scheme=TimeScheme.SEMI_IMPLICIT, seed=33)
        stats = SPDEStatisticsService.mode_statistics(SPDEService.sample_spde(cfg), beta=2.0, alpha=1.0)
        assert stats.relative_errors[0] <= 0.1

    def test_repeated_runs_are_bit_identical(self):
        cfg = SpdeConfigFactory(quick=True, reaction=allen_cahn(), seed=34)
        np.testing.assert_array_equal(SPDEService.simulate_spde(cfg).states, SPDEService.simulate_spde(cfg).states)

    def test_chains_do_not_depend_on_chain_count(self):
        small = SPDEService.simulate_spde(SpdeConfigFactory(quick=True, reaction=free(), n_chains=2, seed=35))
        large = SPDEService.simulate_spde(SpdeConfigFactory(quick=True, reaction=free(), n_chains=4, seed=35))
        np.testing.assert_array_equal(small.states, large.states[:, :2])

    def test_normal_start_draws_from_the_reference(self):
        cfg = SpdeConfigFactory(n_steps=1, n_chains=2000, x0=InitialState.NORMAL, seed=36)
        start = SPDEService.simulate_spde(cfg).states[0]
        assert start[:, 0].var() == pytest.approx(1.0 / np.pi ** 2, rel=0.1)

    @pytest.mark.filterwarnings('ignore::core.utils.exceptions.StabilityWarning')
    def test_destabilizing_reaction_diverges(self):
        cfg = SpdeConfigFactory(
            reaction=reaction_from_expression('u**4'), n_modes=4, dt=1e-2, n_steps=1000, n_chains=2,
            x0=(5.0, 0.0, 0.0, 0.0), seed=37,
        )
        with pytest.raises(DivergenceError) as excinfo:
            SPDEService.simulate_spde(cfg)
        assert excinfo.value.context['mode'] >= 1

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SpdeConfigFactory(beta=0.0)
        with pytest.raises(ConfigError):
            SpdeConfigFactory(scheme='crank_nicolson')
        assert SpdeConfigFactory(n_modes=16).quadrature_nodes == 65

    def test_stiffness(self):
        cfg = SpdeConfigFactory(n_modes=16, dt=1e-3)
        assert cfg.stiffness == pytest.approx(1e-3 * (16 * np.pi) ** 2)


@pytest.mark.unit
class TestBetaInversion:
    @pytest.mark.parametrize('beta', [2.0, 0.5])
    def test_linear_reaction(self, beta):
        report = SPDEInversionService.invert_beta_spde(gaussian_modes(8, beta, seed=40), linear())
        assert report.target == InversionTarget.BETA_SPDE
        assert report.value == pytest.approx(beta, rel=0.05)
        assert report.statistical

    def test_free_field(self):
        report = SPDEInversionService.invert_beta_spde(gaussian_modes(8, 2.0, alpha=0.0, seed=41), free())
        assert report.value == pytest.approx(2.0, rel=0.05)

    def test_modes_agree(self):
        report = SPDEInversionService.invert_beta_spde(gaussian_modes(8, 2.0, seed=42), linear(), modes=3)
        assert len(report.per_axis) == 3
        assert max(report.per_axis) - min(report.per_axis) <= 0.2

    def test_too_few_effective_samples(self):
        with pytest.raises(InsufficientSupportError):
            SPDEInversionService.invert_beta_spde(gaussian_modes(8, 2.0, size=5000), linear())

    def test_ratio(self):
        report = SPDEInversionService.beta_ratio_spde(
            gaussian_modes(8, 2.0, seed=43), gaussian_modes(8, 1.0, seed=44), linear(),
        )
        assert report.value == pytest.approx(2.0, rel=0.05)


@pytest.mark.unit
class TestDriftInversion:
    def test_linear_section(self):
        section = SPDEInversionService.log_ratio_section(linear(), 2.0, modes=(1,), n_modes=8)
        report = SPDEInversionService.invert_drift_spde(section, reaction=linear())
        amplitude = section.axes[0]
        assert report.error_against(-amplitude[None, :]) <= 1e-9
        assert report.thresholds['reference_error'] <= 1e-9

    def test_free_field_section(self):
        report = SPDEInversionService.invert_drift_spde(
            SPDEInversionService.log_ratio_section(free(), 2.0, modes=(2,), n_modes=8),
        )
        assert report.error_against(0.0) == 0.0

    def test_cubic_reaction_matches_projection(self):
        section = SPDEInversionService.log_ratio_section(allen_cahn(), 2.0, modes=(1, 2), nodes=41, n_modes=8)
        report = SPDEInversionService.invert_drift_spde(section, reaction=allen_cahn())
        assert report.recovered.shape == (2, 41, 41)
        assert report.thresholds['reference_error'] <= 1e-6
        assert report.masked_fraction == pytest.approx(1.0 - (37 / 41) ** 2)

    def test_scaled_pair_gives_scaled_drift(self):
        section = SPDEInversionService.log_ratio_section(allen_cahn().scaled(3.0), 6.0, modes=(1,), n_modes=8)
        base = SPDEInversionService.invert_drift_spde(
            SPDEInversionService.log_ratio_section(allen_cahn(), 2.0, modes=(1,), n_modes=8),
        )
        scaled = SPDEInversionService.invert_drift_spde(section)
        np.testing.assert_allclose(scaled.recovered.compressed(), 3.0 * base.recovered.compressed(), atol=1e-10)

    def test_drift_difference(self):
        first = SPDEInversionService.log_ratio_section(linear(alpha=1.0), 2.0, modes=(1,), n_modes=8)
        second = SPDEInversionService.log_ratio_section(linear(alpha=2.0), 2.0, modes=(1,), n_modes=8)
        diff = SPDEInversionService.reaction_drift_difference(first, second, 2.0)
        np.testing.assert_allclose(diff.compressed(), np.abs(first.axes[0][2:-2]), atol=1e-9)

    def test_too_many_section_modes(self):
        with pytest.raises(NumericalDomainError):
            SPDEInversionService.log_ratio_section(linear(), 2.0, modes=(1, 2, 3, 4))


@pytest.mark.unit
class TestSerializersAndPersistence:
    def test_section_builds_config(self):
        sim = SimConfigSerializer(data={'dt': '0.001', 'n_steps': '100', 'n_chains': '2'})
        assert sim.is_valid(), sim.errors
        section = SpdeSectionSerializer(
            data={'reaction': 'linear', 'alpha': '2', 'n_modes': '8', 'scheme': 'exponential'},
        )
        assert section.is_valid(), section.errors
        cfg = section.build_config(sim.build_config(default_seed=5))
        assert cfg.reaction.linear_rate == 2.0
        assert cfg.n_modes == 8 and cfg.seed == 5 and cfg.scheme == TimeScheme.EXPONENTIAL

    def test_expression_reaction(self):
        section = SpdeSectionSerializer(data={'reaction': 'quartic', 'potential': '-u**4/4'})
        assert section.is_valid(), section.errors
        assert section.build_reaction().name == 'quartic'

    def test_unknown_reaction_is_invalid(self):
        section = SpdeSectionSerializer(data={'reaction': 'sine_gordon'})
        assert not section.is_valid()
        assert 'reaction' in section.errors

    def test_section_modes_within_range(self):
        section = SpdeSectionSerializer(data={'n_modes': '4', 'section_modes': '1, 5'})
        assert not section.is_valid()

    def test_statistics_serializer(self):
        stats = SPDEStatisticsService.mode_statistics(gaussian_modes(4, 2.0, size=20_000), beta=2.0, alpha=1.0)
        data = ModeStatisticsSerializer(stats).data
        assert len(data['variances']) == 4
        assert data['series_trace'] == pytest.approx(SPDEStatisticsService.series_trace(2.0, 1.0))

    def test_mode_samples_round_trip(self, tmp_path):
        measure = SPDEService.sample_spde(SpdeConfigFactory(quick=True, seed=50))
        restored = SPDEService.read_mode_samples(SPDEService.write_mode_samples(measure, tmp_path / 'modes.csv'))
        np.testing.assert_array_equal(restored.samples, measure.samples)
        np.testing.assert_array_equal(restored.chain_ids, measure.chain_ids)

    def test_field_snapshots(self, tmp_path):
        measure = SPDEService.sample_spde(SpdeConfigFactory(quick=True, seed=51))
        frame = pd.read_csv(SPDEService.write_field_snapshots(measure, tmp_path / 'fields.csv', count=2))
        assert list(frame.columns) == ['chain', 'step', 'xi', 'value']
        assert len(frame) == 4 * 2 * 33
        assert (frame.loc[frame['xi'].isin([0.0, 1.0]), 'value'] == 0.0).all()


@pytest.mark.slow
class TestLongRuns:
    def test_refinement_keeps_leading_modes(self):
        coarse = SPDEService.sample_spde(SpdeConfigFactory(reaction=allen_cahn(), n_modes=8, n_steps=100_000, seed=60))
        fine = SPDEService.sample_spde(SpdeConfigFactory(reaction=allen_cahn(), n_modes=16, n_steps=100_000, seed=61))
        coarse, fine = (SPDEStatisticsService.mode_statistics(measure, 2.0) for measure in (coarse, fine))
        np.testing.assert_allclose(coarse.variances[:4], fine.variances[:4], rtol=0.06)

    def test_allen_cahn_widens_the_first_mode(self):
        cfg = SpdeConfigFactory(reaction=allen_cahn(), n_modes=8, n_steps=100_000, seed=62)
        stats = SPDEStatisticsService.mode_statistics(SPDEService.sample_spde(cfg), beta=2.0, alpha=0.0)
        assert stats.variances[0] > 1.0 / np.pi ** 2

    def test_beta_from_simulated_equilibrium(self):
        measure = SPDEService.sample_spde(SpdeConfigFactory(n_steps=200_000, thinning=20, seed=63))
        report = SPDEInversionService.invert_beta_spde(measure, linear())
        assert report.value == pytest.approx(2.0, rel=0.1)
