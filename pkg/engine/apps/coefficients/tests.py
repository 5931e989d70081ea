import numpy as np
import pytest

from core.utils.exceptions import (
    CoefficientSpecError,
    ConfigError,
    DegenerateDiffusionWarning,
    NumericalDomainError,
)

from .models import CoefficientKind, ConditionTag, Verdict
from .presets import preset
from .serializers import CoefficientSpecSerializer, ConditionReportSerializer
from .services import CoefficientService, ConditionService


@pytest.mark.unit
class TestCoefficientPair:
    def test_ou_preset_is_langevin(self):
        pair = preset('ou', alpha=1.0, beta=2.0)
        assert pair.kind == CoefficientKind.LANGEVIN
        np.testing.assert_allclose(pair.drift_1d([-1.0, 0.0, 2.0]), [1.0, 0.0, -2.0])
        np.testing.assert_allclose(pair.diffusion_1d([0.0, 3.0]), [1.0, 1.0])

    def test_vectorized_shapes_in_two_dimensions(self):
        pair = preset('gaussian', alpha=1.0, beta=2.0, dimension=2)
        points = np.zeros((5, 2))
        assert pair.drift_at(points).shape == (5, 2)
        assert pair.sigma_at(points).shape == (5, 2, 2)
        np.testing.assert_allclose(pair.diffusion_at(points)[0], np.eye(2))

    def test_inconsistent_gradient_is_rejected(self):
        with pytest.raises(CoefficientSpecError) as excinfo:
            CoefficientService.pair_from_expressions(potential='-x**2/2', drift='-2*x', beta=2.0)
        assert excinfo.value.condition == 'gradient_consistency'

    def test_potential_requires_beta(self):
        with pytest.raises(CoefficientSpecError):
            CoefficientService.pair_from_expressions(potential='-x**2/2')

    def test_unknown_symbol_is_rejected(self):
        with pytest.raises(CoefficientSpecError):
            CoefficientService.pair_from_expressions(drift='-y', sigma='1')

    def test_state_dependent_noise_is_general(self):
        pair = preset('cauchy_gauge')
        assert pair.kind == CoefficientKind.GENERAL
        assert pair.heavy_tailed
        np.testing.assert_allclose(pair.diffusion_1d([0.0, 1.0]), [2.0, 3.0])

    def test_pairs_are_immutable(self):
        pair = preset('ou')
        with pytest.raises(Exception):
            pair.beta = 3.0
        with pytest.raises(TypeError):
            pair.metadata['heavy_tailed'] = True


@pytest.mark.unit
class TestCheckConditions:
    BOX = ([-5.0], [5.0])

    def test_ou_monotone_constant(self):
        report = ConditionService.check_conditions(preset('ou'), self.BOX, n_samples=512, seed=3)
        assert report.verdict == Verdict.PASS
        assert report.monotone_constant == pytest.approx(-2.0, abs=1e-9)
        assert report.coercive_constants[1] > 0
        assert report.label == 'sampled, not proven'

    def test_cauchy_drift_passes(self):
        report = ConditionService.check_conditions(preset('cauchy_drift'), self.BOX, n_samples=1024, seed=1)
        assert report.passed
        # sup of 2 b'(x) is 1/2, attained at |x| = sqrt(3)
        assert report.monotone_constant <= 0.5 + 1e-6

    def test_sign_flipped_fails_coercivity(self):
        report = ConditionService.check_conditions(preset('sign_flipped'), self.BOX, n_samples=256)
        assert report.verdict == Verdict.FAIL
        assert ConditionTag.COERCIVE in report.failed_conditions

    def test_degenerate_noise_fails_ellipticity(self):
        pair = CoefficientService.pair_from_expressions(drift='-x', sigma='0')
        report = ConditionService.check_conditions(pair, self.BOX, n_samples=256)
        assert ConditionTag.NONDEGENERATE in report.failed_conditions

    def test_cubic_growth_exponent(self):
        pair = CoefficientService.polynomial_pair([0.0, 0.0, 0.0, -1.0], [1.0])
        report = ConditionService.check_conditions(pair, ([-10.0], [10.0]), n_samples=1024)
        assert report.growth_exponent == pytest.approx(3.0, abs=0.05)

    def test_same_seed_same_report(self):
        first = ConditionService.check_conditions(preset('double_well'), self.BOX, n_samples=128, seed=11)
        second = ConditionService.check_conditions(preset('double_well'), self.BOX, n_samples=128, seed=11)
        assert first == second

    def test_rejects_too_few_samples(self):
        with pytest.raises(NumericalDomainError):
            ConditionService.check_conditions(preset('ou'), self.BOX, n_samples=1)

    def test_rejects_box_of_wrong_dimension(self):
        with pytest.raises(NumericalDomainError):
            ConditionService.check_conditions(preset('ou'), ([-1.0, -1.0], [1.0, 1.0]), n_samples=16)

    def test_report_serializes(self):
        report = ConditionService.check_conditions(preset('sign_flipped'), self.BOX, n_samples=64)
        data = ConditionReportSerializer(report).data
        assert data['verdict'] == 'fail'
        assert data['violations'][0]['condition'] == 'coe'


@pytest.mark.unit
class TestConstructors:
    def test_polynomial_pair(self):
        pair = CoefficientService.polynomial_pair([0.0, 1.0, 0.0, -1.0], [1.0, 0.5])
        np.testing.assert_allclose(pair.drift_1d([2.0]), [2.0 - 8.0])
        np.testing.assert_allclose(pair.diffusion_1d([2.0]), [0.5 * 4.0])

    def test_polynomial_pair_rejects_positive_leading_coefficient(self):
        with pytest.raises(CoefficientSpecError) as excinfo:
            CoefficientService.polynomial_pair([0.0, 1.0], [1.0])
        assert excinfo.value.condition == 'leading_coefficient'

    def test_polynomial_pair_rejects_unbalanced_noise(self):
        with pytest.raises(CoefficientSpecError) as excinfo:
            CoefficientService.polynomial_pair([0.0, -1.0], [0.0, 0.0, 1.0])
        assert excinfo.value.condition == 'polynomial_balance'

    def test_polynomial_pair_ou(self):
        pair = CoefficientService.polynomial_pair([0.0, -1.0], [np.sqrt(2.0)])
        np.testing.assert_allclose(pair.drift_1d([-1.0, 3.0]), [1.0, -3.0])
        np.testing.assert_allclose(pair.diffusion_1d([0.0, 5.0]), [1.0, 1.0])

    @pytest.mark.parametrize('sigma', [[0.0, 1.0], [0.0, np.sqrt(2.0)], [0.0, 0.0, 1.0]])
    def test_polynomial_pair_cubic_drift_accepts_balanced_noise(self, sigma):
        # 2 a_3 + c_2^2 < 0: c_2 is the x^2 coefficient of sigma
        pair = CoefficientService.polynomial_pair([0.0, 0.0, 0.0, -1.0], sigma)
        np.testing.assert_allclose(pair.drift_1d([2.0]), [-8.0])

    @pytest.mark.parametrize('drift, sigma', [
        ([0.0, 0.0, 0.0, -1.0], [0.0, 0.0, np.sqrt(2.0)]),
        ([0.0, 0.0, 0.0, -1.0], [0.0, 0.0, 3.0]),
        ([0.0, -1.0], [0.0, np.sqrt(2.0)]),
    ])
    def test_polynomial_pair_rejects_noise_at_or_above_the_balance(self, drift, sigma):
        with pytest.raises(CoefficientSpecError) as excinfo:
            CoefficientService.polynomial_pair(drift, sigma)
        assert excinfo.value.condition == 'polynomial_balance'

    def test_skew_from_upper_entries(self):
        matrix = CoefficientService.skew_matrix([1.0, 2.0, 3.0])
        np.testing.assert_allclose(matrix, -matrix.T)
        assert matrix[0, 1] == 1.0 and matrix[0, 2] == 2.0 and matrix[1, 2] == 3.0

    def test_skew_projects_full_matrix(self):
        matrix = CoefficientService.skew_matrix([[1.0, 4.0], [2.0, 1.0]])
        np.testing.assert_allclose(matrix, [[0.0, 1.0], [-1.0, 0.0]])

    def test_skew_rejects_bad_entry_count(self):
        with pytest.raises(CoefficientSpecError):
            CoefficientService.skew_matrix([1.0, 2.0], dimension=3)

    def test_diffusion_tensor_warns_when_degenerate(self):
        pair = CoefficientService.pair_from_expressions(drift='-x', sigma='x')
        with pytest.warns(DegenerateDiffusionWarning):
            tensor = CoefficientService.diffusion_tensor(pair, 0.0)
        assert tensor.shape == (1, 1)


@pytest.mark.unit
class TestPresetsAndSerializers:
    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset('no_such_pair')

    def test_unknown_preset_parameter(self):
        with pytest.raises(ConfigError):
            preset('cauchy_drift', beta=3.0)

    def test_spec_serializer_builds_preset(self):
        serializer = CoefficientSpecSerializer(data={'preset': 'ou', 'alpha': '0.5', 'beta': '2'})
        assert serializer.is_valid(), serializer.errors
        pair = serializer.build_pair()
        np.testing.assert_allclose(pair.drift_1d([2.0]), [-1.0])

    def test_spec_serializer_builds_expressions(self):
        serializer = CoefficientSpecSerializer(data={'drift': '-x**3', 'sigma': '1', 'name': 'cubic'})
        assert serializer.is_valid(), serializer.errors
        pair = serializer.build_pair()
        assert pair.name == 'cubic'
        assert pair.kind == CoefficientKind.ADDITIVE

    def test_spec_serializer_requires_beta_with_potential(self):
        serializer = CoefficientSpecSerializer(data={'potential': '-x**2'})
        assert not serializer.is_valid()
        assert 'beta' in serializer.errors
