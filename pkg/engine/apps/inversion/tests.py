import math

import numpy as np
import pytest
from scipy import stats

from apps.coefficients.models import CoefficientKind, CoefficientPair
from apps.coefficients.presets import preset
from apps.coefficients.services import CoefficientService, ConditionService
from apps.density.services import DensityService, FokkerPlanckService, GridOperators
from apps.simulation.models import EmpiricalMeasure, SimConfig
from apps.simulation.services import DistanceService
from core.utils.exceptions import HeavyTailWarning, InsufficientSupportError, InvalidFamilyError

from .models import Aggregation, InversionTarget, NonidentifiabilityReport, Verdict
from .serializers import (
    CounterexampleSectionSerializer,
    GaugeFamilySerializer,
    InversionReportSerializer,
    InversionSectionSerializer,
    NonidentifiabilityReportSerializer,
)
from .services import CounterexampleService, InversionService

ROTATION = np.array([[0.0, 1.0], [-1.0, 0.0]])


def normal_grid(box=(-5.0, 5.0), nodes=20001, scale=1.0):
    return DensityService.density_from_function(
        lambda p: stats.norm.pdf(p[:, 0], scale=scale), ([box[0]], [box[1]]), nodes,
    )


def linear_drift(rate):
    return lambda points: -rate * np.asarray(points)


def numeric_cauchy_pair():
    return CoefficientPair(
        dimension=1,
        noise_dimension=1,
        drift=lambda p: -2.0 * p / (1.0 + p ** 2),
        sigma=lambda p: np.full((len(p), 1, 1), math.sqrt(2.0)),
        name='cauchy-numeric',
        metadata={'heavy_tailed': True},
    )


@pytest.fixture(scope='module')
def cauchy_grid():
    with pytest.warns(HeavyTailWarning):
        return DensityService.closed_form_density_1d(preset('cauchy_drift'), ([-50.0], [50.0]), 20001)


@pytest.fixture(scope='module')
def gaussian_2d():
    return DensityService.gibbs_density(preset('gaussian', dimension=2), 2.0, ([-6.0, -6.0], [6.0, 6.0]), 241)


@pytest.mark.unit
class TestDriftInversion:
    def test_ou_drift(self):
        grid = DensityService.closed_form_density_1d(preset('ou'), ([-5.0], [5.0]), 10001)
        report = InversionService.invert_drift_1d(grid, preset('ou'))
        assert report.target == InversionTarget.DRIFT_1D
        assert report.error_against(-grid.nodes[0]) <= 1e-4
        assert report.masked_fraction < 0.01

    def test_cauchy_drift_with_unit_diffusion(self, cauchy_grid):
        x = cauchy_grid.nodes[0]
        report = InversionService.invert_drift_1d(cauchy_grid, lambda s: np.ones_like(s))
        assert report.error_against(-2.0 * x / (1.0 + x ** 2)) <= 1e-4

    def test_gauge_members_recover_the_same_drift(self, cauchy_grid):
        x = cauchy_grid.nodes[0]
        report = InversionService.invert_drift_1d(cauchy_grid, preset('cauchy_gauge'))
        assert report.error_against(-2.0 * x / (1.0 + x ** 2)) <= 1e-4

    @pytest.mark.parametrize('name,half_width,nodes', [
        ('ou', 8.0, 16001),
        ('double_well', 4.0, 8001),
        ('quartic', 4.0, 8001),
    ])
    def test_round_trip_1d(self, name, half_width, nodes):
        pair = preset(name)
        grid = DensityService.closed_form_density_1d(pair, ([-half_width], [half_width]), nodes)
        report = InversionService.invert_drift_1d(grid, pair)
        assert report.error_against(pair.drift_1d(grid.nodes[0])) <= 1e-4

    def test_mostly_masked_density(self):
        grid = DensityService.density_from_function(lambda p: np.exp(-p[:, 0] ** 2 * 50.0), ([-10.0], [10.0]), 2001)
        with pytest.raises(InsufficientSupportError):
            InversionService.invert_drift_1d(grid, lambda s: np.ones_like(s))

    def test_gaussian_2d(self, gaussian_2d):
        report = InversionService.invert_drift_langevin(gaussian_2d, 2.0)
        exact = -np.stack(gaussian_2d.mesh())
        assert report.recovered.shape == (2, 241, 241)
        assert report.error_against(exact) <= 1e-8

    def test_quartic_gibbs(self):
        grid = DensityService.gibbs_density(lambda p: -p[:, 0] ** 4 / 2.0, 2.0, ([-3.0], [3.0]), 6001)
        report = InversionService.invert_drift_langevin(grid, 2.0)
        assert report.error_against(-2.0 * grid.nodes[0][None, :] ** 3) <= 1e-4

    def test_round_trip_langevin(self):
        pair = preset('double_well')
        grid = DensityService.gibbs_density(pair, pair.beta, ([-4.0], [4.0]), 8001)
        report = InversionService.invert_drift_langevin(grid, pair.beta)
        exact = pair.drift_at(grid.points()).T
        assert report.error_against(exact) <= 1e-4

    def test_scaled_potential_and_beta_give_scaled_drift(self):
        c = 3.0
        grid = DensityService.gibbs_density(lambda p: -c * p[:, 0] ** 2 / 2.0, c * 2.0, ([-6.0], [6.0]), 2401)
        report = InversionService.invert_drift_langevin(grid, c * 2.0)
        assert report.error_against(-c * grid.nodes[0][None, :]) <= 1e-8

    def test_drift_difference(self):
        narrow = normal_grid((-6.0, 6.0), 2401)
        wide = normal_grid((-6.0, 6.0), 2401, scale=2.0)
        diff = InversionService.drift_difference(narrow, wide, 2.0)
        x = narrow.nodes[0]
        assert np.ma.max(np.ma.abs(diff - 0.75 * np.abs(x))) <= 1e-8


@pytest.mark.unit
class TestBetaInversion:
    def test_additive_ou(self):
        report = InversionService.invert_beta_additive(normal_grid(), linear_drift(1.0))
        assert report.value == pytest.approx(2.0, abs=1e-6)
        assert report.dispersion <= 1e-6
        assert report.value == np.median(report.pointwise_estimates)
        assert report.aggregation == Aggregation.MEDIAN

    def test_additive_quartic(self):
        grid = DensityService.gibbs_density(preset('quartic'), 2.0, ([-4.0], [4.0]), 8001)
        report = InversionService.invert_beta_additive(grid, preset('quartic'))
        assert report.value == pytest.approx(2.0, abs=1e-4)

    def test_additive_scales_with_drift(self):
        report = InversionService.invert_beta_additive(normal_grid(), linear_drift(2.0))
        assert report.value == pytest.approx(4.0, abs=1e-5)

    def test_trimmed_mean(self):
        report = InversionService.invert_beta_additive(
            normal_grid(), linear_drift(1.0), aggregation=Aggregation.TRIMMED_MEAN,
        )
        assert report.value == pytest.approx(2.0, abs=1e-5)
        assert report.aggregation == Aggregation.TRIMMED_MEAN

    def test_distinct_betas_separate(self):
        estimates = [
            InversionService.invert_beta_additive(normal_grid(scale=math.sqrt(beta / 2.0)), linear_drift(1.0)).value
            for beta in (1.0, 3.0)
        ]
        assert abs(estimates[1] - estimates[0]) >= 0.5 * 2.0

    def test_coarse_grid_has_too_few_nodes(self):
        with pytest.raises(InsufficientSupportError):
            InversionService.invert_beta_additive(normal_grid(nodes=41), linear_drift(1.0))

    def test_langevin_1d(self):
        report = InversionService.invert_beta_langevin(normal_grid((-6.0, 6.0), 2401), linear_drift(1.0))
        assert report.value == pytest.approx(2.0, abs=1e-8)

    def test_langevin_axes_agree(self, gaussian_2d):
        report = InversionService.invert_beta_langevin(gaussian_2d, preset('gaussian', dimension=2))
        assert report.value == pytest.approx(2.0, abs=1e-8)
        assert abs(report.per_axis[0] - report.per_axis[1]) <= 1e-10

    def test_langevin_quartic(self):
        grid = DensityService.gibbs_density(lambda p: -p[:, 0] ** 4 / 2.0, 2.0, ([-3.0], [3.0]), 6001)
        report = InversionService.invert_beta_langevin(grid, lambda p: -2.0 * np.asarray(p) ** 3)
        assert report.value == pytest.approx(2.0, abs=1e-4)

    def test_langevin_mostly_masked(self):
        grid = DensityService.density_from_function(lambda p: np.exp(-p[:, 0] ** 2 * 50.0), ([-10.0], [10.0]), 2001)
        with pytest.raises(InsufficientSupportError):
            InversionService.invert_beta_langevin(grid, linear_drift(100.0))

    def test_ratios(self):
        p1 = normal_grid((-6.0, 6.0), 4001)
        p2 = normal_grid((-6.0, 6.0), 4001, scale=math.sqrt(1.5))
        assert InversionService.beta_ratio(p1, p2, linear_drift(1.0)).value == pytest.approx(2.0 / 3.0, abs=1e-8)
        ratio = InversionService.beta_ratio_additive(p1, p2, linear_drift(1.0))
        assert ratio.value == pytest.approx(2.0 / 3.0, abs=1e-5)

    def test_samples(self):
        rng = np.random.default_rng(11)
        measure = EmpiricalMeasure.from_samples(rng.standard_normal((500_000, 1)))
        report = InversionService.invert_beta_additive_from_samples(
            measure, linear_drift(1.0), ([-4.0], [4.0]), 321, seed=3,
        )
        assert report.statistical
        assert report.value == pytest.approx(2.0, rel=0.1)
        assert report.bootstrap_dispersion > 0.0
        assert report.grid.metadata['samples'] == 500_000

    def test_too_few_samples(self):
        measure = EmpiricalMeasure.from_samples(np.zeros((10, 1)))
        with pytest.raises(InsufficientSupportError):
            InversionService.invert_beta_additive_from_samples(measure, linear_drift(1.0), ([-4.0], [4.0]), 81)


@pytest.mark.unit
@pytest.mark.filterwarnings('ignore::core.utils.exceptions.HeavyTailWarning')
class TestGaugeFamily:
    def test_cauchy_gauge(self):
        family = CounterexampleService.gauge_diffusion_family(preset('cauchy_drift'), 0.0, 1.0, (-20.0, 20.0))
        x = np.linspace(-20.0, 20.0, 101)
        assert family.symbolic
        np.testing.assert_allclose(family.derived_diffusion(x), 2.0 + x ** 2, rtol=1e-12)
        assert family.certificate <= 1e-8
        assert family.constant == pytest.approx(1.0)

    def test_offset_is_matched_at_the_anchor(self):
        family = CounterexampleService.gauge_diffusion_family(preset('ou'), 0.5, 0.75, (-6.0, 6.0))
        gap = family.derived_diffusion(np.array([0.5]))[0] - family.base_diffusion(np.array([0.5]))[0]
        assert gap == pytest.approx(0.75, abs=1e-12)

    def test_zero_offset_is_identity(self):
        family = CounterexampleService.gauge_diffusion_family(preset('ou'), 0.0, 0.0, (-6.0, 6.0))
        x = np.linspace(-6.0, 6.0, 51)
        np.testing.assert_allclose(family.derived_diffusion(x), 1.0)

    def test_ou_gauge_is_flagged(self):
        family = CounterexampleService.gauge_diffusion_family(preset('ou'), 0.0, 1.0, (-5.0, 5.0))
        x = np.array([0.0, 1.0, 2.5])
        np.testing.assert_allclose(family.derived_diffusion(x), 1.0 + np.exp(x ** 2 / 2.0), rtol=1e-10)
        assert 'coe' in family.flags
        assert family.certificate <= 1e-8

    def test_grid_primitive(self):
        family = CounterexampleService.gauge_diffusion_family(numeric_cauchy_pair(), 0.0, 1.0, (-20.0, 20.0))
        x = np.linspace(-19.5, 19.5, 41)
        assert not family.symbolic
        np.testing.assert_allclose(family.derived_diffusion(x), 2.0 + x ** 2, rtol=1e-6)
        np.testing.assert_allclose(family.derived_diffusion(np.array([30.0])), [902.0], rtol=1e-6)
        assert family.certificate <= 1e-6

    def test_offset_below_minus_d2(self):
        with pytest.raises(InvalidFamilyError):
            CounterexampleService.gauge_diffusion_family(preset('cauchy_drift'), 0.0, -1.0, (-20.0, 20.0))

    def test_negative_derived_diffusion(self):
        with pytest.raises(InvalidFamilyError):
            CounterexampleService.gauge_diffusion_family(preset('ou'), 0.0, -0.5, (-5.0, 5.0))

    def test_gauge_equivalence(self):
        equivalent, deviation = CounterexampleService.gauge_equivalent(
            preset('cauchy_drift'), preset('cauchy_gauge'), 0.0, (-20.0, 20.0),
        )
        assert equivalent
        assert deviation <= 1e-8
        equivalent, _ = CounterexampleService.gauge_equivalent(
            preset('cauchy_drift'), lambda x: 1.0 + np.asarray(x) ** 2, 0.0, (-20.0, 20.0),
        )
        assert not equivalent

    def test_serializer(self):
        family = CounterexampleService.gauge_diffusion_family(preset('cauchy_drift'), 0.0, 1.0, (-20.0, 20.0))
        data = GaugeFamilySerializer(family).data
        assert data['derived'] == 'cauchy_drift-gauge'
        assert data['symbolic'] is True
        assert len(data['advisories']) == 2


@pytest.mark.unit
class TestSkewFamily:
    def test_rotation(self):
        pair = CounterexampleService.skew_drift_family(preset('gaussian', dimension=2), ROTATION)
        np.testing.assert_allclose(pair.drift_at(np.array([[1.0, 2.0]])), [[1.0, -3.0]])
        assert pair.kind == CoefficientKind.ADDITIVE
        assert pair.name == 'gaussian-skew'

    def test_upper_triangular_entries(self):
        pair = CounterexampleService.skew_drift_family(preset('gaussian', dimension=2), [1.0])
        np.testing.assert_allclose(pair.drift_at(np.array([[1.0, 2.0]])), [[1.0, -3.0]])

    def test_zero_matrix(self):
        base = preset('gaussian', dimension=2)
        pair = CounterexampleService.skew_drift_family(base, np.zeros((2, 2)))
        points = np.array([[0.3, -1.2], [2.0, 0.5]])
        np.testing.assert_allclose(pair.drift_at(points), base.drift_at(points))

    def test_rejects_non_skew(self):
        with pytest.raises(InvalidFamilyError):
            CounterexampleService.skew_drift_family(preset('gaussian', dimension=2), np.eye(2))

    def test_rejects_one_dimension(self):
        with pytest.raises(InvalidFamilyError):
            CounterexampleService.skew_drift_family(preset('ou'), [[0.0]])

    def test_density_stays_stationary(self):
        base = preset('gaussian', dimension=2)
        grid = DensityService.gibbs_density(base, 2.0, ([-7.0, -7.0], [7.0, 7.0]), 281)
        rotated = CounterexampleService.skew_drift_family(base, ROTATION)
        assert FokkerPlanckService.fp_residual(grid, rotated).weak_max <= 1e-6

    def test_skew_flux_is_divergence_free(self):
        grid = DensityService.gibbs_density(preset('gaussian', dimension=3), 2.0, ([-6.0] * 3, [6.0] * 3), 61)
        skew = np.array([[0.0, 1.0, -2.0], [-1.0, 0.0, 0.5], [2.0, -0.5, 0.0]])
        grad = np.stack([GridOperators.partial(grid.values, h, axis) for axis, h in enumerate(grid.spacing)])
        flux = np.einsum('ij,j...->i...', skew, grad)
        assert np.max(np.abs(GridOperators.divergence(flux, grid.spacing))) <= 1e-10

    def test_score_from_density_grid(self, gaussian_2d):
        pair = CoefficientService.pair_from_expressions(drift=['-x1', '-x2'], dimension=2, name='ou-2d')
        skewed = CounterexampleService.skew_drift_family(pair, ROTATION, density=gaussian_2d)
        np.testing.assert_allclose(skewed.drift_at(np.array([[1.0, 2.0]])), [[1.0, -3.0]], atol=1e-6)


@pytest.mark.unit
class TestPerturbation:
    def test_error_grows_with_noise(self):
        grid = normal_grid(nodes=2001)
        result = InversionService.perturbation_experiment(
            grid, lambda g: InversionService.invert_beta_additive(g, linear_drift(1.0)), (0.0, 1e-6, 1e-4), seed=5,
        )
        assert result.errors[0] == 0.0
        assert result.errors[2] > result.errors[1] > 0.0
        assert len(result.amplification) == 2


@pytest.mark.unit
class TestSerializers:
    def test_scalar_report(self):
        data = InversionReportSerializer(InversionService.invert_beta_additive(normal_grid(), linear_drift(1.0))).data
        assert data['recovered'] == pytest.approx(2.0, abs=1e-6)
        assert data['field_file'] is None
        assert data['formula'] == 'beta = 2 div(b p) / lap p'

    def test_field_report(self):
        report = InversionService.invert_drift_1d(normal_grid(nodes=2001), lambda s: np.ones_like(s))
        data = InversionReportSerializer(report, context={'field_file': 'drift.csv'}).data
        assert data['recovered'] is None
        assert data['field_file'] == 'drift.csv'

    def test_section_defaults(self):
        serializer = InversionSectionSerializer(data={'target': 'beta_langevin'})
        assert serializer.is_valid(), serializer.errors
        assert serializer.validated_data['density'] == 'gibbs'

    def test_samples_only_for_additive_beta(self):
        serializer = InversionSectionSerializer(data={'target': 'drift_1d', 'density': 'samples'})
        assert not serializer.is_valid()
        assert 'density' in serializer.errors

    def test_counterexample_section(self):
        serializer = CounterexampleSectionSerializer(data={'family': 'skew', 'skew': '1, 0, 2'})
        assert serializer.is_valid(), serializer.errors
        assert serializer.validated_data['skew'] == [1.0, 0.0, 2.0]


@pytest.mark.unit
class TestNonidentifiabilityDiagnostics:
    BOX = ([-5.0], [5.0])

    def report_for(self, pair_a, pair_b):
        rng = np.random.default_rng(8)
        measures = tuple(EmpiricalMeasure.from_samples(rng.standard_normal((400, 1))) for _ in range(2))
        advisories = tuple(
            ConditionService.check_conditions(pair, self.BOX, n_samples=256, seed=0) for pair in (pair_a, pair_b)
        )
        return NonidentifiabilityReport(
            pair_names=(pair_a.name, pair_b.name),
            distance=DistanceService.distance(*measures),
            verdict=Verdict.INDISTINGUISHABLE,
            advisories=advisories,
            measures=measures,
        )

    def test_failed_conditions_are_listed_per_pair(self):
        ou, flipped = preset('ou'), preset('sign_flipped')
        report = self.report_for(ou, flipped)
        assert list(report.diagnostics) == [flipped.name]
        assert 'coe' in report.diagnostics[flipped.name]

    def test_diagnostics_are_serialized(self):
        flipped = preset('sign_flipped')
        data = NonidentifiabilityReportSerializer(self.report_for(preset('ou'), flipped)).data
        assert 'coe' in data['diagnostics'][flipped.name]
        assert len(data['advisories']) == 2

    def test_passing_pairs_have_no_diagnostics(self):
        report = self.report_for(preset('ou'), preset('gaussian', dimension=1))
        assert report.diagnostics == {}


@pytest.mark.slow
class TestNonidentifiability:
    def test_cauchy_gauge_pair(self):
        cfg = SimConfig(dt=1e-2, n_steps=100_000, n_chains=1000, thinning=100, seed=21)
        report = CounterexampleService.verify_nonidentifiability(
            preset('cauchy_drift'), preset('cauchy_gauge'), cfg, box=([-20.0], [20.0]), reference=stats.cauchy(),
        )
        assert report.verdict == Verdict.INDISTINGUISHABLE
        assert all(d.ks <= 0.02 for d in report.reference_distances.values())

    def test_skew_pair(self):
        base = preset('gaussian', dimension=2)
        cfg = SimConfig(dt=1e-2, n_steps=20_000, n_chains=200, thinning=20, seed=22)
        reference = DensityService.gibbs_density(base, 2.0, ([-7.0, -7.0], [7.0, 7.0]), 141)
        report = CounterexampleService.verify_nonidentifiability(
            base, CounterexampleService.skew_drift_family(base, ROTATION), cfg, reference=reference,
        )
        assert report.indistinguishable
        assert all(max(d.ks_per_axis) <= 0.02 for d in report.reference_distances.values())

    def test_different_ou_rates(self):
        slow = preset('ou')
        fast = CoefficientService.pair_from_expressions(drift='-2*x', sigma='sqrt(2)', name='ou-fast')
        cfg = SimConfig(dt=1e-2, n_steps=10_000, n_chains=100, thinning=10, seed=23)
        assert CounterexampleService.verify_nonidentifiability(slow, fast, cfg).verdict == Verdict.DISTINGUISHABLE
