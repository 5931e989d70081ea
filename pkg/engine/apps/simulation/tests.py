import math

import numpy as np
import pytest
from scipy import stats

from apps.coefficients.presets import preset
from apps.coefficients.services import CoefficientService
from apps.density.services import DensityService
from core.utils.exceptions import (
    ConfigError,
    DivergenceError,
    HeavyTailWarning,
    InsufficientSupportError,
    MassLossWarning,
    StabilityWarning,
)

from .factories import SimConfigFactory
from .models import EmpiricalMeasure, InitialState, SimConfig
from .rng import noise_at, noise_block
from .serializers import SimConfigSerializer
from .services import DensityEstimationService, DistanceService, SimulationService


def iid(samples, seed=None):
    return EmpiricalMeasure.from_samples(samples, seed=seed)


@pytest.fixture(scope='module')
def ou_measure():
    cfg = SimConfig(dt=1e-2, n_steps=20_000, n_chains=200, thinning=10, seed=42)
    return SimulationService.sample_invariant(preset('ou'), cfg)


@pytest.mark.unit
class TestNoise:
    def test_step_is_addressable(self):
        block = noise_block(7, 3, 2, 1)
        np.testing.assert_array_equal(noise_at(7, 3, 2 * 1024 + 17, 1), block[17])

    def test_chains_are_independent_streams(self):
        assert not np.array_equal(noise_block(7, 0, 0, 1), noise_block(7, 1, 0, 1))
        assert not np.array_equal(noise_block(7, 0, 0, 1), noise_block(8, 0, 0, 1))

    def test_samples_do_not_depend_on_chain_count(self):
        pair = preset('double_well')
        small = SimulationService.sample_invariant(pair, SimConfig(dt=1e-2, n_steps=3000, n_chains=2, seed=5))
        large = SimulationService.sample_invariant(pair, SimConfig(dt=1e-2, n_steps=3000, n_chains=4, seed=5))
        np.testing.assert_array_equal(small.by_chain(), large.by_chain()[:2])

    def test_repeated_runs_are_bit_identical(self):
        cfg = SimConfigFactory(quick=True, seed=9)
        first = SimulationService.euler_maruyama(preset('cauchy_gauge'), cfg)
        second = SimulationService.euler_maruyama(preset('cauchy_gauge'), cfg)
        np.testing.assert_array_equal(first.states, second.states)


@pytest.mark.unit
class TestEulerMaruyama:
    def test_ou_variance(self, ou_measure):
        assert ou_measure.samples.var() == pytest.approx(1.0, rel=0.06)

    def test_ou_mean_within_standard_errors(self, ou_measure):
        average = SimulationService.ensemble_average(ou_measure, lambda x: x[:, 0])
        assert abs(average.value) <= 3.0 * average.standard_error

    def test_equal_counts_per_chain(self, ou_measure):
        counts = np.bincount(ou_measure.chain_ids)
        assert np.all(counts == counts[0])
        assert ou_measure.n_chains == 200
        assert 0 < ou_measure.ess <= ou_measure.size

    def test_sign_flipped_drift_diverges(self):
        with pytest.raises(DivergenceError) as excinfo:
            SimulationService.euler_maruyama(
                preset('sign_flipped'), SimConfig(dt=1e-2, n_steps=5000, n_chains=2, seed=1),
            )
        assert excinfo.value.chain in (0, 1)
        assert 0 < excinfo.value.step <= 5000

    def test_stability_advisory(self):
        with pytest.warns(StabilityWarning):
            trajectory = SimulationService.euler_maruyama(preset('ou'), SimConfig(dt=1.0, n_steps=10, seed=1))
        assert trajectory.stability_advisory == pytest.approx(1.0, rel=1e-6)

    @pytest.mark.parametrize('offset', [1.0, 2.0])
    def test_stability_advisory_follows_the_lipschitz_offset(self, monkeypatch, offset):
        # Jacobian of -x^3 is -3 x^2, largest at the outer anchors
        monkeypatch.setattr(SimulationService, 'LIPSCHITZ_OFFSET', offset)
        pair = CoefficientService.pair_from_expressions(drift='-x**3', name='cubic')
        advisory = SimulationService.stability_advisory(pair, SimConfig(dt=1e-3, n_steps=10), np.zeros((1, 1)))
        assert advisory == pytest.approx(3e-3 * offset ** 2, rel=1e-6)

    def test_records_initial_state(self):
        cfg = SimConfig(dt=1e-2, n_steps=10, n_chains=3, x0=(0.5,))
        trajectory = SimulationService.euler_maruyama(preset('ou'), cfg)
        assert trajectory.states.shape == (11, 3, 1)
        np.testing.assert_array_equal(trajectory.states[0], 0.5)

    def test_normal_initial_states_differ_between_chains(self):
        cfg = SimConfig(dt=1e-2, n_steps=1, n_chains=3, x0=InitialState.NORMAL, seed=2)
        first = SimulationService.euler_maruyama(preset('ou'), cfg).states[0]
        assert len(np.unique(first)) == 3

    def test_two_dimensional_langevin_variance(self):
        cfg = SimConfig(dt=1e-2, n_steps=20_000, n_chains=100, thinning=10, seed=3)
        measure = SimulationService.sample_invariant(preset('gaussian', dimension=2), cfg)
        np.testing.assert_allclose(measure.samples.var(axis=0), [1.0, 1.0], rtol=0.08)

    def test_different_seeds(self):
        pair = preset('ou')
        first = SimulationService.sample_invariant(
            pair, SimConfig(dt=1e-2, n_steps=40_000, n_chains=50, thinning=10, seed=1),
        )
        second = SimulationService.sample_invariant(
            pair, SimConfig(dt=1e-2, n_steps=40_000, n_chains=50, thinning=10, seed=2),
        )
        assert not np.array_equal(first.samples, second.samples)
        assert first.samples.var() == pytest.approx(second.samples.var(), rel=0.12)

    def test_time_and_ensemble_averages_agree(self):
        cfg = SimConfig(dt=1e-2, n_steps=200_000, n_chains=4, thinning=10, seed=17)
        measure = SimulationService.sample_invariant(preset('ou'), cfg)
        along = SimulationService.time_average(measure, lambda x: x[:, 0] ** 2, chain=0)
        across = SimulationService.ensemble_average(measure, lambda x: x[:, 0] ** 2)
        combined = math.hypot(along.standard_error, across.standard_error)
        assert abs(along.value - across.value) <= 3.0 * combined

    def test_chain_count_invariance(self):
        pair = preset('ou')
        wide = SimulationService.sample_invariant(
            pair, SimConfig(dt=1e-2, n_steps=8_000, n_chains=32, thinning=4, seed=21),
        )
        long = SimulationService.sample_invariant(
            pair, SimConfig(dt=1e-2, n_steps=32_000, n_chains=8, thinning=4, seed=22),
        )
        a = SimulationService.ensemble_average(wide, lambda x: x[:, 0] ** 2)
        b = SimulationService.ensemble_average(long, lambda x: x[:, 0] ** 2)
        assert abs(a.value - b.value) <= 4.0 * math.hypot(a.standard_error, b.standard_error)


@pytest.mark.slow
class TestLongRuns:
    def test_ou_variance_at_small_step(self):
        cfg = SimConfig(dt=1e-3, n_steps=200_000, n_chains=1000, thinning=100, seed=11)
        measure = SimulationService.sample_invariant(preset('ou'), cfg)
        assert measure.samples.var() == pytest.approx(1.0, rel=0.02)

    def test_cauchy_interquartile_range(self):
        cfg = SimConfig(dt=1e-2, n_steps=100_000, n_chains=400, thinning=20, seed=12)
        measure = SimulationService.sample_invariant(preset('cauchy_drift'), cfg)
        q1, q3 = np.percentile(measure.samples[:, 0], [25, 75])
        assert q3 - q1 == pytest.approx(2.0, rel=0.05)


@pytest.mark.unit
class TestDensityEstimates:
    @pytest.fixture(scope='class')
    def normal_draws(self):
        return iid(np.random.default_rng(0).standard_normal((1_000_000, 1)))

    def test_kde_matches_normal(self, normal_draws):
        grid = DensityEstimationService.kde_density(normal_draws, ([-5.0], [5.0]), 1001)
        truth = stats.norm.pdf(grid.nodes[0])
        assert np.max(np.abs(grid.values - truth)) <= 0.01

    def test_histogram_matches_normal(self, normal_draws):
        grid = DensityEstimationService.histogram_density(normal_draws, ([-5.0], [5.0]), 101)
        truth = stats.norm.pdf(grid.nodes[0])
        assert np.max(np.abs(grid.values - truth)) <= 0.01

    def test_histogram_and_kde_agree(self):
        measure = iid(np.random.default_rng(1).standard_normal((100_000, 1)))
        _, hist_cdf = DensityService.grid_cdf(DensityEstimationService.histogram_density(measure, ([-6.0], [6.0]), 241))
        _, kde_cdf = DensityService.grid_cdf(DensityEstimationService.kde_density(measure, ([-6.0], [6.0]), 241))
        assert np.max(np.abs(hist_cdf - kde_cdf)) <= 0.02

    def test_cauchy_mass_loss(self):
        draws = stats.cauchy.rvs(size=100_000, random_state=np.random.default_rng(3))
        with pytest.warns(MassLossWarning):
            grid = DensityEstimationService.kde_density(iid(draws.reshape(-1, 1)), ([-10.0], [10.0]), 1001)
        expected = 2.0 * (0.5 - math.atan(10.0) / math.pi)
        assert grid.metadata['mass_loss'] == pytest.approx(expected, abs=0.004)

    def test_no_overlap_is_an_error(self):
        measure = iid(100.0 + np.random.default_rng(4).random((2000, 1)))
        with pytest.raises(InsufficientSupportError):
            DensityEstimationService.histogram_density(measure, ([-1.0], [1.0]), 21)

    def test_too_few_samples(self):
        with pytest.raises(InsufficientSupportError):
            DensityEstimationService.kde_density(iid(np.zeros((999, 1))), ([-1.0], [1.0]), 21)


@pytest.mark.unit
class TestDistance:
    def test_against_itself(self, ou_measure):
        report = DistanceService.distance(ou_measure, ou_measure)
        assert report.ks == 0.0
        assert report.wasserstein1 == 0.0
        assert report.indistinguishable

    def test_two_normal_samples(self):
        rng = np.random.default_rng(5)
        report = DistanceService.distance(
            iid(rng.standard_normal((100_000, 1))), iid(rng.standard_normal((100_000, 1))),
        )
        assert report.ks < 0.01
        assert report.threshold == pytest.approx(DistanceService.ks_threshold(100_000, 100_000))

    def test_normal_against_cauchy_grid(self):
        with pytest.warns(HeavyTailWarning):
            cauchy = DensityService.closed_form_density_1d(preset('cauchy_drift'), ([-200.0], [200.0]), 8001)
        measure = iid(np.random.default_rng(6).standard_normal((100_000, 1)))
        report = DistanceService.distance(measure, cauchy)
        assert report.ks >= 0.1
        assert not report.indistinguishable

    def test_against_frozen_distribution(self):
        measure = iid(np.random.default_rng(7).standard_normal((50_000, 1)))
        report = DistanceService.distance(measure, stats.norm())
        assert report.ks < 0.01
        assert report.wasserstein1 is None

    def test_projections_in_two_dimensions(self):
        rng = np.random.default_rng(8)
        report = DistanceService.distance(iid(rng.standard_normal((20_000, 2))), iid(rng.standard_normal((20_000, 2))))
        assert len(report.ks_per_axis) == 2
        assert len(report.ks_projections) == 8
        assert report.wasserstein1 is None
        assert report.threshold == pytest.approx(DistanceService.ks_threshold(20_000, 20_000, 0.005))

    def test_threshold_value(self):
        assert DistanceService.ks_threshold(1e6, 1e6) == pytest.approx(1.3581 * math.sqrt(2e-6), rel=1e-3)


@pytest.mark.unit
class TestConfigAndPersistence:
    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ConfigError):
            SimConfig(dt=0.0, n_steps=10)

    def test_factory_trait(self):
        cfg = SimConfigFactory(quick=True)
        assert cfg.n_steps == 4_000 and cfg.n_chains == 4

    def test_serializer_parses_point(self):
        serializer = SimConfigSerializer(data={'dt': '0.01', 'n_steps': '100', 'x0': '0.5'})
        assert serializer.is_valid(), serializer.errors
        cfg = serializer.build_config(default_seed=3)
        assert cfg.x0 == (0.5,) and cfg.seed == 3

    def test_samples_round_trip(self, tmp_path, ou_measure):
        path = SimulationService.write_samples(ou_measure, tmp_path / 'samples.csv')
        restored = SimulationService.read_samples(path)
        np.testing.assert_array_equal(restored.samples, ou_measure.samples)
        np.testing.assert_array_equal(restored.chain_ids, ou_measure.chain_ids)
