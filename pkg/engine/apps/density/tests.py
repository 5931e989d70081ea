import math

import numpy as np
import pytest
from scipy.special import gamma

from apps.coefficients.presets import preset
from apps.coefficients.services import CoefficientService
from core.utils.exceptions import (
    CoefficientDomainError,
    ConfigError,
    HeavyTailWarning,
    IntegrabilityWarning,
    NumericalDomainError,
    TruncationError,
)

from .models import DensityGrid
from .services import DensityService, FokkerPlanckService, GridOperators


def cauchy(x):
    return 1.0 / (math.pi * (1.0 + x ** 2))


def standard_normal(x):
    return np.exp(-0.5 * x ** 2) / math.sqrt(2.0 * math.pi)


@pytest.fixture(scope='module')
def normal_grid():
    return DensityService.closed_form_density_1d(preset('ou'), ([-8.0], [8.0]), 4001)


@pytest.mark.unit
class TestDensityGrid:
    def test_rejects_negative_values(self):
        with pytest.raises(NumericalDomainError):
            DensityGrid(lower=[0.0], upper=[1.0], values=-np.ones(9))

    def test_rejects_even_node_count(self):
        with pytest.raises(ConfigError):
            DensityGrid(lower=[0.0], upper=[1.0], values=np.ones(10))

    def test_rejects_too_few_nodes(self):
        with pytest.raises(ConfigError):
            DensityGrid(lower=[0.0], upper=[1.0], values=np.ones(7))

    def test_values_are_read_only(self, normal_grid):
        with pytest.raises(ValueError):
            normal_grid.values[0] = 1.0

    def test_normalized_mass(self, normal_grid):
        assert normal_grid.normalized
        assert abs(normal_grid.total_mass - 1.0) <= 1e-8
        assert abs(normal_grid.mass - 1.0) <= 1e-8


@pytest.mark.unit
class TestClosedForm:
    def test_ou_is_standard_normal(self, normal_grid):
        x = normal_grid.nodes[0]
        assert np.max(np.abs(normal_grid.values - standard_normal(x))) <= 1e-8

    def test_cauchy_drift_with_unit_diffusion(self):
        with pytest.warns(HeavyTailWarning):
            grid = DensityService.closed_form_density_1d(preset('cauchy_drift'), ([-200.0], [200.0]), 8001)
        x = grid.nodes[0]
        np.testing.assert_allclose(grid.values, cauchy(x), rtol=1e-3)
        assert grid.tail_mass == pytest.approx(2.0 / (math.pi * 200.0), rel=0.05)

    def test_gauge_pair_shares_the_cauchy_density(self):
        box = ([-50.0], [50.0])
        with pytest.warns(HeavyTailWarning):
            reference = DensityService.closed_form_density_1d(preset('cauchy_drift'), box, 20001)
        with pytest.warns(HeavyTailWarning):
            gauge = DensityService.closed_form_density_1d(preset('cauchy_gauge'), box, 20001)
        assert np.max(np.abs(reference.values - gauge.values)) <= 1e-8

    def test_nonpositive_diffusion(self):
        pair = CoefficientService.pair_from_expressions(drift='-x', sigma='x')
        with pytest.raises(CoefficientDomainError):
            DensityService.closed_form_density_1d(pair, ([-2.0], [2.0]), 41)

    def test_truncation_suggests_wider_box(self):
        with pytest.raises(TruncationError) as excinfo:
            DensityService.closed_form_density_1d(preset('ou'), ([-2.0], [2.0]), 401)
        assert excinfo.value.suggested_domain == [[-4.0], [4.0]]
        assert excinfo.value.tail_mass > 1e-2

    def test_heavy_tail_is_an_error_unless_allowed(self):
        pair = CoefficientService.pair_from_expressions(drift='-2*x / (1 + x**2)', sigma='sqrt(2)')
        with pytest.raises(TruncationError):
            DensityService.closed_form_density_1d(pair, ([-20.0], [20.0]), 2001)
        with pytest.warns(HeavyTailWarning):
            DensityService.closed_form_density_1d(pair, ([-20.0], [20.0]), 2001, allow_heavy_tail=True)

    def test_double_well_is_bimodal(self):
        grid = DensityService.closed_form_density_1d(preset('double_well'), ([-5.0], [5.0]), 1001)
        x = grid.nodes[0]
        peak = x[np.argmax(grid.values)]
        assert abs(abs(peak) - 1.0) < 0.02


@pytest.mark.unit
class TestGibbs:
    def test_two_dimensional_gaussian(self):
        grid = DensityService.gibbs_density(preset('gaussian', dimension=2), 2.0, ([-8.0, -8.0], [8.0, 8.0]), 161)
        xx, yy = grid.mesh()
        expected = np.exp(-0.5 * (xx ** 2 + yy ** 2)) / (2.0 * math.pi)
        assert np.max(np.abs(grid.values - expected)) <= 1e-6

    def test_quartic_partition_function(self):
        grid = DensityService.gibbs_density(preset('quartic'), 2.0, ([-6.0], [6.0]), 2001)
        expected = math.sqrt(2.0) * gamma(0.25) / 2.0
        assert math.exp(grid.log_normalizer) == pytest.approx(expected, rel=1e-8)

    @pytest.mark.parametrize('scale', [0.5, 2.0, 10.0])
    def test_scale_invariance(self, scale):
        def potential(points):
            return -points[:, 0] ** 4 / 4.0 - points[:, 0] ** 2

        def scaled(points):
            return scale * potential(points)

        box = ([-5.0], [5.0])
        base = DensityService.gibbs_density(potential, 2.0, box, 1001)
        other = DensityService.gibbs_density(scaled, 2.0 * scale, box, 1001)
        np.testing.assert_allclose(other.values, base.values, rtol=1e-12, atol=1e-15)

    def test_no_overflow_for_steep_potentials(self):
        grid = DensityService.gibbs_density(lambda p: 800.0 - 400.0 * p[:, 0] ** 2, 0.5, ([-1.0], [1.0]), 2001)
        assert np.all(np.isfinite(grid.values))
        assert grid.mass == pytest.approx(1.0, abs=1e-8)

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(NumericalDomainError):
            DensityService.gibbs_density(preset('ou'), 0.0, ([-5.0], [5.0]), 101)


@pytest.mark.unit
class TestNormalization:
    def test_simpson_is_exact_for_cubics(self):
        x = np.linspace(0.0, 2.0, 9)
        grid = DensityGrid(lower=[0.0], upper=[2.0], values=x ** 3 + x + 1.0)
        with pytest.warns(IntegrabilityWarning):
            result = DensityService.normalization_constant(grid)
        assert result.constant == pytest.approx(8.0, abs=1e-12)

    def test_gaussian_constant(self):
        grid = DensityService.density_from_function(lambda p: np.exp(-0.5 * p[:, 0] ** 2), ([-8.0], [8.0]), 4001)
        result = DensityService.normalization_constant(grid)
        assert abs(result.constant - math.sqrt(2.0 * math.pi)) <= 1e-10
        assert not result.heavy_tail

    def test_cauchy_numerator_is_heavy(self):
        grid = DensityService.density_from_function(lambda p: 1.0 / (1.0 + p[:, 0] ** 2), ([-200.0], [200.0]), 8001)
        result = DensityService.normalization_constant(grid)
        assert result.constant == pytest.approx(math.pi, rel=1e-2)
        assert result.total == pytest.approx(math.pi, rel=1e-3)
        assert result.heavy_tail

    def test_constant_numerator_diverges(self):
        grid = DensityService.density_from_function(lambda p: np.ones(len(p)), ([-10.0], [10.0]), 101)
        with pytest.warns(IntegrabilityWarning):
            result = DensityService.normalization_constant(grid)
        assert result.divergent


@pytest.mark.unit
class TestOperators:
    def test_grad_log_of_normal(self):
        grid = DensityService.density_from_function(lambda p: standard_normal(p[:, 0]), ([-5.0], [5.0]), 1001)
        score = GridOperators.grad_log(grid)
        assert not score.mask.any()
        assert np.max(np.abs(score[0] - (-grid.nodes[0]))) <= 1e-6

    def test_grad_log_masks_far_tails(self):
        grid = DensityService.density_from_function(lambda p: standard_normal(p[:, 0]), ([-12.0], [12.0]), 1201)
        mask = np.ma.getmaskarray(GridOperators.grad_log(grid))[0]
        assert mask[0] and mask[-1]
        assert not mask[600]

    def test_laplacian_of_cauchy_at_zero(self):
        grid = DensityService.density_from_function(lambda p: cauchy(p[:, 0]), ([-10.0], [10.0]), 2001)
        assert GridOperators.laplacian(grid)[1000] == pytest.approx(-2.0 / math.pi, abs=1e-4)

    def test_laplacian_converges_at_second_order(self):
        errors = []
        for nodes in (81, 161):
            grid = DensityService.density_from_function(lambda p: np.exp(-0.5 * p[:, 0] ** 2), ([-4.0], [4.0]), nodes)
            x = grid.nodes[0]
            exact = (x ** 2 - 1.0) * np.exp(-0.5 * x ** 2)
            errors.append(np.max(np.abs(GridOperators.laplacian(grid) - exact)))
        assert math.log2(errors[0] / errors[1]) >= 1.9

    def test_divergence_of_constant_field(self):
        field = np.ones((2, 21, 21)) * np.array([3.0, -1.0])[:, None, None]
        assert np.max(np.abs(GridOperators.divergence(field, np.array([0.1, 0.1])))) < 1e-12


@pytest.mark.unit
class TestResidual:
    def test_ou_residual(self, normal_grid):
        report = FokkerPlanckService.fp_residual(normal_grid, preset('ou'))
        assert report.linf <= 5e-6
        assert report.weak_max <= 1e-6
        assert report.interior_margin == 2

    def test_gauge_pair_weak_residual(self):
        with pytest.warns(HeavyTailWarning):
            grid = DensityService.closed_form_density_1d(preset('cauchy_gauge'), ([-50.0], [50.0]), 20001)
        assert FokkerPlanckService.fp_residual(grid, preset('cauchy_gauge')).weak_max <= 1e-6

    def test_mismatched_pair(self):
        grid = DensityService.density_from_function(
            lambda p: cauchy(p[:, 0]), ([-20.0], [20.0]), 4001, normalized=False,
        )
        assert FokkerPlanckService.fp_residual(grid, preset('ou')).linf > 0.1

    @pytest.mark.parametrize('name,half_width', [('ou', 8.0), ('double_well', 4.0), ('quartic', 6.0)])
    def test_presets_are_stationary(self, name, half_width):
        pair = preset(name)
        grid = DensityService.closed_form_density_1d(pair, ([-half_width], [half_width]), 4001)
        assert FokkerPlanckService.fp_residual(grid, pair).weak_max <= 1e-6

    def test_two_dimensional_residual(self):
        pair = preset('gaussian', dimension=2)
        grid = DensityService.gibbs_density(pair, 2.0, ([-7.0, -7.0], [7.0, 7.0]), 281)
        report = FokkerPlanckService.fp_residual(grid, pair)
        assert report.linf <= 1e-3
        assert report.weak_max <= 1e-6


@pytest.mark.unit
class TestMarginalsAndPersistence:
    def test_cdf_of_normal(self, normal_grid):
        nodes, cdf = DensityService.grid_cdf(normal_grid)
        assert cdf[2000] == pytest.approx(0.5, abs=1e-9)
        assert cdf[-1] == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.diff(cdf) >= 0)

    def test_round_trip(self, tmp_path, normal_grid):
        csv_path, header_path = DensityService.write_grid(normal_grid, tmp_path / 'grid.csv')
        assert header_path.exists()
        restored = DensityService.read_grid(csv_path)
        np.testing.assert_array_equal(restored.values, normal_grid.values)
        assert restored.normalized
        assert restored.log_normalizer == normal_grid.log_normalizer
