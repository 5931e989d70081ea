import dataclasses
import json
import math
import textwrap
from datetime import datetime, timezone
from io import StringIO

import pandas as pd
import pytest
from django.core.management import call_command
from django.core.management.base import CommandError
from freezegun import freeze_time

from apps.spde.models import TimeScheme
from core.utils.exceptions import ConfigError, ExitCode

from .acceptance import CRITERIA, AcceptanceSuite, SuiteContext, _cauchy_run, _spde_scheme, default_tolerances
from .config import ExperimentConfig
from .models import Check, CheckStatus, Comparison
from .runner import MANIFEST_NAME, RunDirectory, sha256_of_file
from .serializers import AcceptanceSectionSerializer, CheckSerializer

OU_SIMULATION = """
    [coefficients]
    preset = ou

    [simulation]
    dt = 0.01
    n_steps = 20000
    n_chains = 20
    thinning = 10
    x0 = normal
    seed = 3

    [sampling]
    alpha = 0.0001

    [grid]
    lower = -5
    upper = 5
    nodes = 201
"""


def call(command, tmp_path, config=None, *args):
    """call_command writing into tmp_path/runs; returns stderr."""
    argv = ['--out', str(tmp_path / 'runs')]
    if config is not None:
        path = tmp_path / f'{command}.ini'
        path.write_text(textwrap.dedent(config))
        argv += ['--config', str(path)]
    stderr = StringIO()
    try:
        call_command(command, *argv, *args, stdout=StringIO(), stderr=stderr)
    except CommandError as exc:
        exc.stderr = stderr.getvalue()
        raise
    return stderr.getvalue()


def run(command, tmp_path, config=None, *args):
    """Successful run: (run directory, manifest)."""
    call(command, tmp_path, config, *args)
    (run_dir,) = [p for p in (tmp_path / 'runs').iterdir() if p.is_dir()]
    return run_dir, json.loads((run_dir / MANIFEST_NAME).read_text())


def run_failing(command, tmp_path, config=None, *args):
    """Failed run: (exit code, error payload)."""
    with pytest.raises(CommandError) as excinfo:
        call(command, tmp_path, config, *args)
    return excinfo.value.returncode, json.loads(excinfo.value.stderr)


def checks_by_name(manifest):
    return {check['name']: check for check in manifest['checks']}


@pytest.mark.unit
class TestExperimentConfig:
    def test_values_and_lines(self):
        cfg = ExperimentConfig('# comment\n[simulation]\ndt = 0.01  # step\nn_steps = 10\n')
        assert cfg.section('simulation') == {'dt': '0.01', 'n_steps': '10'}
        assert cfg.line('simulation', 'n_steps') == 4
        assert cfg.line('simulation') == 2
        assert cfg.section('absent') == {}

    def test_parse_error_carries_line(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig('[simulation]\ndt = 0.01\nnot a key value pair\n')
        assert excinfo.value.line == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_path(tmp_path / 'absent.ini')

    def test_unknown_key_names_key_and_line(self):
        from apps.simulation.serializers import SimConfigSerializer

        cfg = ExperimentConfig('[simulation]\ndt = 0.01\nn_steps = 10\nstep_size = 3\n')
        with pytest.raises(ConfigError) as excinfo:
            cfg.validate('simulation', SimConfigSerializer)
        assert excinfo.value.key == 'step_size'
        assert excinfo.value.line == 4
        assert excinfo.value.exit_code == ExitCode.CONFIG_ERROR

    def test_invalid_value_names_key(self):
        from apps.simulation.serializers import SimConfigSerializer

        cfg = ExperimentConfig('[simulation]\ndt = fast\nn_steps = 10\n')
        with pytest.raises(ConfigError) as excinfo:
            cfg.validate('simulation', SimConfigSerializer)
        assert (excinfo.value.section, excinfo.value.key, excinfo.value.line) == ('simulation', 'dt', 2)

    def test_unexpected_section(self):
        cfg = ExperimentConfig('[coefficients]\npreset = ou\n\n[spde]\nn_modes = 4\n')
        with pytest.raises(ConfigError) as excinfo:
            cfg.require_sections(('coefficients', 'simulation'))
        assert excinfo.value.section == 'spde'
        assert excinfo.value.line == 4

    def test_missing_required_section(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig('').require_sections(('density',), ('density',))
        assert excinfo.value.section == 'density'

    def test_digest_ignores_layout(self):
        a = ExperimentConfig('[b]\ny = 2\nx = 1\n[a]\nz = 3\n')
        b = ExperimentConfig('# same values\n[a]\nz =   3\n\n[b]\nx = 1  ; inline\ny = 2\n')
        assert a.digest(seed=1) == b.digest(seed=1)

    def test_digest_tracks_values_and_run_options(self):
        cfg = ExperimentConfig('[a]\nx = 1\n')
        assert cfg.digest(seed=1) != ExperimentConfig('[a]\nx = 2\n').digest(seed=1)
        assert cfg.digest(seed=1) != cfg.digest(seed=2)
        assert cfg.digest(seed=1, quick=False) != cfg.digest(seed=1, quick=True)


@pytest.mark.unit
class TestChecks:
    def test_status(self):
        assert Check.at_most('ks', 0.01, 0.02).status == CheckStatus.PASS
        assert Check.at_most('ks', 0.03, 0.02).status == CheckStatus.FAIL
        assert Check.at_most('ks', 0.03, 0.02, binding=False).status == CheckStatus.ADVISORY
        assert Check.at_least('order', 2.0, 1.9).passed
        assert not Check.at_least('order', 1.5, 1.9).passed

    def test_nan_never_passes(self):
        assert not Check.at_most('ks', math.nan, 1.0).passed

    def test_error_check(self):
        check = Check.from_error('beta', ConfigError('bad'), criterion='spde')
        assert check.status == CheckStatus.FAIL
        assert check.label == 'spde.beta'
        assert check.detail.startswith('ConfigError')

    def test_advisory_copy(self):
        check = Check.at_most('ks', 1.0, 0.5, criterion='cauchy').advisory()
        assert check.status == CheckStatus.ADVISORY
        assert check.criterion == 'cauchy'

    def test_serializer(self):
        data = CheckSerializer(Check.at_least('order', 2.0, 1.9, criterion='fp')).data
        assert data['name'] == 'fp.order'
        assert data['comparison'] == Comparison.AT_LEAST
        assert data['status'] == CheckStatus.PASS


@pytest.mark.unit
class TestRunDirectory:
    @freeze_time('2024-06-07 12:30:00')
    def test_name_and_commit(self, tmp_path):
        run_dir = RunDirectory(tmp_path, 'f' * 64).open()
        assert run_dir.staging.name == 'ffffffffffff-20240607T123000Z.partial'
        run_dir.write_json('report.json', {'value': 1.5})
        final = run_dir.commit()
        assert final.name == 'ffffffffffff-20240607T123000Z'
        assert not run_dir.staging.exists()
        assert json.loads((final / 'report.json').read_text()) == {'value': 1.5}

    def test_name_collision_gets_suffix(self, tmp_path):
        now = datetime(2024, 6, 7, tzinfo=timezone.utc)
        first = RunDirectory(tmp_path, 'a' * 64, now=now).open().commit()
        second = RunDirectory(tmp_path, 'a' * 64, now=now).open().commit()
        assert second.name == f'{first.name}-1'

    def test_discard(self, tmp_path):
        run_dir = RunDirectory(tmp_path, 'b' * 64).open()
        run_dir.write_json('partial.json', {})
        run_dir.discard()
        assert list(tmp_path.iterdir()) == []

    def test_outputs_exclude_manifest(self, tmp_path):
        run_dir = RunDirectory(tmp_path, 'c' * 64).open()
        path = run_dir.write_json('a.json', {'x': 1})
        run_dir.write_json(MANIFEST_NAME, {})
        (output,) = run_dir.outputs()
        assert output.name == 'a.json'
        assert output.sha256 == sha256_of_file(path)


@pytest.mark.unit
class TestAcceptanceSection:
    def test_nested_overrides(self):
        serializer = AcceptanceSectionSerializer(
            data={'criteria': 'drift_round_trip, scale_degeneracy', 'drift_round_trip.max_error': '1e-3'},
            tolerances=default_tolerances(),
        )
        assert serializer.is_valid(), serializer.errors
        assert serializer.validated_data['criteria'] == ['drift_round_trip', 'scale_degeneracy']
        assert serializer.validated_data['tolerances'] == {'drift_round_trip': {'max_error': 1e-3}}

    def test_unknown_criterion(self):
        serializer = AcceptanceSectionSerializer(data={'criteria': 'telepathy'}, tolerances=default_tolerances())
        assert not serializer.is_valid()
        assert 'criteria' in serializer.errors

    def test_registry(self):
        assert list(CRITERIA) == [
            'cauchy_equilibrium',
            'gauge_nonidentifiability',
            'skew_nonidentifiability',
            'drift_round_trip',
            'langevin_drift_round_trip',
            'diffusion_inversion',
            'fokker_planck_residual',
            'spde_mode_statistics',
            'spde_beta_inversion',
            'scale_degeneracy',
        ]
        assert CRITERIA['fokker_planck_residual'].tolerances == {'weak': 1e-6, 'order': 1.9}

    def test_stated_runs_key(self):
        serializer = AcceptanceSectionSerializer(data={'stated_runs': 'true'}, tolerances=default_tolerances())
        assert serializer.is_valid(), serializer.errors
        assert serializer.validated_data['stated_runs'] is True


@pytest.mark.unit
class TestStatedRuns:
    def context(self, stated_runs):
        return SuiteContext(1, False, 0.1, None, 'cauchy_equilibrium', stated_runs=stated_runs)

    def test_cauchy_default_run_names_the_stated_run(self):
        cfg, detail = _cauchy_run(self.context(False))
        assert (cfg.dt, cfg.n_chains, cfg.n_steps) == (1e-2, 1000, 100_000)
        assert 'dt 0.01, 1000 chains x 100000 steps' in detail
        assert 'stated run: dt 1e-3, 32 chains x 2e5 steps, burn-in 0.5' in detail

    def test_cauchy_stated_run(self):
        cfg, detail = _cauchy_run(self.context(True))
        assert (cfg.dt, cfg.n_chains, cfg.n_steps, cfg.burn_in_fraction) == (1e-3, 32, 200_000, 0.5)
        assert 'stated run' not in detail

    def test_spde_scheme(self):
        scheme, detail = _spde_scheme(self.context(False))
        assert scheme == TimeScheme.EXPONENTIAL
        assert detail.endswith('stated run: semi-implicit Euler')
        scheme, detail = _spde_scheme(self.context(True))
        assert scheme == TimeScheme.SEMI_IMPLICIT
        assert 'stated run' not in detail

    def test_quick_runs_never_use_stated_runs(self, tmp_path):
        run_dir = RunDirectory(tmp_path, 'e' * 64).open()
        assert not AcceptanceSuite(run_dir, seed=1, quick=True, stated_runs=True).stated_runs
        assert AcceptanceSuite(run_dir, seed=1, stated_runs=True).stated_runs


@pytest.mark.integration
class TestSimulateCommand:
    def test_ou_run(self, tmp_path):
        run_dir, manifest = run('simulate', tmp_path, OU_SIMULATION)
        assert manifest['command'] == 'simulate'
        assert manifest['seed'] == 3
        assert manifest['passed']
        assert checks_by_name(manifest)['ks_reference']['status'] == CheckStatus.PASS
        names = {output['name'] for output in manifest['outputs']}
        assert {'samples.csv', 'summary.json', 'estimate.csv', 'reference.csv', 'distance.json'} <= names
        for output in manifest['outputs']:
            assert sha256_of_file(run_dir / output['name']) == output['sha256']
        samples = pd.read_csv(run_dir / 'samples.csv')
        assert len(samples) == 20 * 1000

    def test_seed_option_changes_run(self, tmp_path):
        _, first = run('simulate', tmp_path / 'a', OU_SIMULATION)
        _, second = run('simulate', tmp_path / 'b', OU_SIMULATION, '--seed', '4')
        assert second['seed'] == 4
        assert first['config_hash'] != second['config_hash']

    def test_heavy_tail_advisory(self, tmp_path):
        config = """
            [coefficients]
            preset = cauchy_drift

            [simulation]
            dt = 0.01
            n_steps = 4000
            n_chains = 10
            thinning = 10
        """
        _, manifest = run('simulate', tmp_path, config)
        assert 'HeavyTailWarning' in {advisory['category'] for advisory in manifest['advisories']}
        assert manifest['seed'] > 0

    def test_malformed_config_leaves_nothing(self, tmp_path):
        config = """
            [coefficients]
            preset = ou

            [simulation]
            dt = abc
            n_steps = 100
        """
        code, payload = run_failing('simulate', tmp_path, config)
        assert code == ExitCode.CONFIG_ERROR
        assert payload['context']['key'] == 'dt'
        assert payload['context']['line'] == 6
        out = tmp_path / 'runs'
        assert not out.exists() or not any(out.iterdir())

    def test_section_of_another_command(self, tmp_path):
        code, payload = run_failing('simulate', tmp_path, OU_SIMULATION + '\n[spde]\nn_modes = 4\n')
        assert code == ExitCode.CONFIG_ERROR
        assert payload['context']['section'] == 'spde'


@pytest.mark.integration
class TestDensityCommand:
    def test_closed_form(self, tmp_path):
        config = """
            [coefficients]
            preset = ou

            [density]
            lower = -8
            upper = 8
            nodes = 4001
        """
        run_dir, manifest = run('density', tmp_path, config)
        assert manifest['passed']
        assert set(checks_by_name(manifest)) == {'normalization', 'weak_residual'}
        assert (run_dir / 'density.csv').exists()
        assert (run_dir / 'density.json').exists()

    def test_gibbs_needs_langevin(self, tmp_path):
        config = """
            [coefficients]
            preset = cauchy_gauge

            [density]
            lower = -8
            upper = 8
            nodes = 401
            method = gibbs
        """
        code, payload = run_failing('density', tmp_path, config)
        assert code == ExitCode.CONFIG_ERROR
        assert payload['context']['key'] == 'method'


@pytest.mark.integration
class TestInvertCommand:
    def test_beta_additive(self, tmp_path):
        config = """
            [coefficients]
            preset = ou

            [inversion]
            target = beta_additive

            [grid]
            lower = -5
            upper = 5
            nodes = 2001
        """
        run_dir, manifest = run('invert', tmp_path, config)
        assert manifest['passed']
        report = json.loads((run_dir / 'report.json').read_text())
        assert report['recovered'] == pytest.approx(2.0, rel=1e-4)

    def test_drift_field(self, tmp_path):
        config = """
            [coefficients]
            preset = cauchy_gauge

            [inversion]
            target = drift_1d

            [grid]
            lower = -8
            upper = 8
            nodes = 16001
        """
        run_dir, manifest = run('invert', tmp_path, config)
        assert checks_by_name(manifest)['max_error']['status'] == CheckStatus.PASS
        field = pd.read_csv(run_dir / 'drift.csv')
        assert list(field.columns) == ['x1', 'b1', 'exact_b1', 'mask']
        assert len(field) == 16001

    def test_mostly_masked_langevin_beta(self, tmp_path):
        config = """
            [coefficients]
            preset = ou
            alpha = 100

            [inversion]
            target = beta_langevin
        """
        code, payload = run_failing('invert', tmp_path, config)
        assert code == ExitCode.INSUFFICIENT_SUPPORT
        assert payload['error'] == 'InsufficientSupportError'

    def test_samples_only_for_beta_additive(self, tmp_path):
        config = """
            [coefficients]
            preset = ou

            [inversion]
            target = drift_langevin
            density = samples
        """
        code, payload = run_failing('invert', tmp_path, config)
        assert code == ExitCode.CONFIG_ERROR
        assert payload['context']['key'] == 'density'


@pytest.mark.integration
class TestCounterexampleCommand:
    def test_gauge_family(self, tmp_path):
        config = """
            [coefficients]
            preset = cauchy_drift

            [counterexample]
            family = gauge
            offset = 1
            verify = false
        """
        run_dir, manifest = run('counterexample', tmp_path, config)
        assert checks_by_name(manifest)['certificate']['status'] == CheckStatus.PASS
        family = pd.read_csv(run_dir / 'family.csv')
        x = family['x'].to_numpy()
        assert family['derived_diffusion'].to_numpy() == pytest.approx(2.0 + x ** 2, rel=1e-8)

    def test_offset_losing_ellipticity(self, tmp_path):
        config = """
            [coefficients]
            preset = cauchy_drift

            [counterexample]
            family = gauge
            offset = -2
            verify = false
        """
        code, payload = run_failing('counterexample', tmp_path, config)
        assert code == ExitCode.NUMERICAL_DOMAIN
        assert payload['error'] == 'InvalidFamilyError'

    def test_skew_family_is_stationary(self, tmp_path):
        config = """
            [coefficients]
            preset = gaussian
            dimension = 2

            [counterexample]
            family = skew
            skew = 1
            verify = false

            [grid]
            lower = -6, -6
            upper = 6, 6
            nodes = 241
        """
        run_dir, manifest = run('counterexample', tmp_path, config)
        assert checks_by_name(manifest)['stationarity']['status'] == CheckStatus.PASS
        family = json.loads((run_dir / 'family.json').read_text())
        assert family['skew'] == [[0.0, 1.0], [-1.0, 0.0]]


@pytest.mark.integration
class TestSpdeCommand:
    def test_quick_run_is_advisory(self, tmp_path):
        config = """
            [spde]
            reaction = allen_cahn
            n_modes = 8
            section_modes = 1
            partition_samples = 64
            snapshots = 2

            [simulation]
            dt = 0.001
            n_steps = 20000
            n_chains = 4
            thinning = 10
        """
        run_dir, manifest = run('spde', tmp_path, config, '--quick')
        assert manifest['quick']
        assert manifest['passed']
        assert CheckStatus.FAIL not in {check['status'] for check in manifest['checks']}
        names = {output['name'] for output in manifest['outputs']}
        assert {'modes.csv', 'snapshots.csv', 'mode_statistics.json', 'drift_section.csv', 'partition.json'} <= names
        assert checks_by_name(manifest)['section_drift']['value'] < 1e-6


@pytest.mark.integration
class TestAcceptanceCommand:
    SUBSET = """
        [acceptance]
        criteria = drift_round_trip, scale_degeneracy
    """

    def test_subset_passes(self, tmp_path):
        run_dir, manifest = run('acceptance', tmp_path, self.SUBSET)
        assert manifest['passed']
        criteria = json.loads((run_dir / 'acceptance.json').read_text())
        assert set(criteria) == {'drift_round_trip', 'scale_degeneracy'}
        table = pd.read_csv(run_dir / 'criteria.csv')
        assert set(table['criterion']) == {'drift_round_trip', 'scale_degeneracy'}
        assert table['passed'].all()
        assert 'detail' in table.columns

    def test_tightened_tolerance_fails(self, tmp_path):
        config = self.SUBSET + '        drift_round_trip.max_error = 1e-15\n'
        code, payload = run_failing('acceptance', tmp_path, config)
        assert code == ExitCode.ACCEPTANCE_FAILURE
        assert 'drift_round_trip.max_error.cauchy_drift' in payload['context']['failed']
        run_dir = next((tmp_path / 'runs').iterdir())
        manifest = json.loads((run_dir / MANIFEST_NAME).read_text())
        assert not manifest['passed']

    def test_quick_failures_are_advisory(self, tmp_path):
        config = self.SUBSET + '        drift_round_trip.max_error = 1e-15\n'
        _, manifest = run('acceptance', tmp_path, config, '--quick')
        assert manifest['passed']
        assert manifest['summary'][CheckStatus.ADVISORY] >= 1

    def test_unknown_criterion(self, tmp_path):
        code, payload = run_failing('acceptance', tmp_path, '[acceptance]\ncriteria = telepathy\n')
        assert code == ExitCode.CONFIG_ERROR
        assert payload['context']['key'] == 'criteria'

    def test_errors_become_failed_checks(self, tmp_path, monkeypatch):
        from . import acceptance

        def broken(context, tolerances):
            raise ConfigError('broken criterion')

        criterion = acceptance.CRITERIA['scale_degeneracy']
        monkeypatch.setitem(acceptance.CRITERIA, 'scale_degeneracy', dataclasses.replace(criterion, evaluate=broken))
        run_dir = RunDirectory(tmp_path, 'd' * 64).open()
        checks = AcceptanceSuite(run_dir, seed=1, criteria=['scale_degeneracy']).run()
        assert [check.label for check in checks] == ['scale_degeneracy.error']
        assert checks[0].status == CheckStatus.FAIL


@pytest.mark.slow
def test_full_acceptance_suite(tmp_path):
    run_dir, manifest = run('acceptance', tmp_path)
    assert manifest['passed'], manifest['failed_checks']
    assert len(json.loads((run_dir / 'acceptance.json').read_text())) == len(CRITERIA)
