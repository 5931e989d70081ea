"""
Services for the experiments app.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd
from scipy import stats

from apps.coefficients.serializers import CoefficientSpecSerializer, ConditionReportSerializer
from apps.coefficients.services import CoefficientService, ConditionService
from apps.density.models import NORMALIZATION_TOLERANCE, DensitySource
from apps.density.serializers import (
    DensitySectionSerializer,
    GridSpecSerializer,
    NormalizationSerializer,
    ResidualReportSerializer,
)
from apps.density.services import DensityService, FokkerPlanckService
from apps.inversion.models import InversionTarget
from apps.inversion.serializers import (
    CounterexampleSectionSerializer,
    DensityInput,
    GaugeFamilySerializer,
    InversionReportSerializer,
    InversionSectionSerializer,
    NonidentifiabilityReportSerializer,
    PerturbationResultSerializer,
)
from apps.inversion.services import CounterexampleService, InversionService
from apps.simulation.serializers import (
    DistanceReportSerializer,
    EmpiricalMeasureSummarySerializer,
    SamplingSectionSerializer,
    SimConfigSerializer,
)
from apps.simulation.services import DensityEstimationService, DistanceService, SimulationService
from apps.spde.serializers import (
    ModeStatisticsSerializer,
    PartitionEstimateSerializer,
    ReactionConditionReportSerializer,
    SpdeSectionSerializer,
)
from apps.spde.services import SPDEInversionService, SPDEService, SPDEStatisticsService
from core.utils.boxes import symmetric_box
from core.utils.exceptions import ConfigError, InsufficientSupportError

from .models import Check

logger = logging.getLogger(__name__)


class ExperimentService:
    """
    Experiment families behind the management commands.

    Each `run_*` method validates the config sections it reads, writes its
    artifacts into the run directory and returns the checks the run declares.
    """

    WEAK_RESIDUAL_TOLERANCE = 1e-6
    GAUGE_CERTIFICATE_TOLERANCE = 1e-8
    SECTION_DRIFT_TOLERANCE = 1e-6
    # half width and node count of the grid used when [grid] is absent
    DEFAULT_GRIDS = {1: (10.0, 2001), 2: (6.0, 121), 3: (5.0, 41)}
    CONDITION_BOX_HALF_WIDTH = 5.0

    # Shared section handling

    @staticmethod
    def build_pair(config):
        return config.validate('coefficients', CoefficientSpecSerializer).build_pair()

    @staticmethod
    def build_simulation(config, options):
        """[simulation] with the effective seed; quick runs scale the step count."""
        sim = config.validate('simulation', SimConfigSerializer).build_config(options.seed)
        sim = dataclasses.replace(sim, seed=options.seed)
        return sim.scaled(options.quick_factor) if options.quick else sim

    @classmethod
    def grid_box(cls, config, dimension):
        """
        Box and per-axis node counts from [grid], or the default grid of the
        dimension. None when no grid is available (d > 3 without [grid]).
        """
        if not config.has_section('grid'):
            if dimension not in cls.DEFAULT_GRIDS:
                return None
            half_width, nodes = cls.DEFAULT_GRIDS[dimension]
            return symmetric_box(half_width, dimension), [nodes] * dimension
        spec = config.validate('grid', GridSpecSerializer)
        lower, upper = spec.box
        if len(lower) != dimension:
            raise ConfigError(
                f'Grid has {len(lower)} axes, the pair has dimension {dimension}',
                section='grid', key='lower', line=config.line('grid', 'lower'),
            )
        return (lower, upper), list(spec.validated_data['nodes'])

    @staticmethod
    def reference_density(pair, box, nodes, allow_heavy_tail=None):
        """Closed form in 1D, Gibbs density for Langevin pairs, else None."""
        if pair.dimension == 1:
            return DensityService.closed_form_density_1d(pair, box, nodes[0], allow_heavy_tail=allow_heavy_tail)
        if pair.is_langevin:
            allow = pair.heavy_tailed if allow_heavy_tail is None else allow_heavy_tail
            return DensityService.gibbs_density(pair, pair.beta, box, nodes, allow_heavy_tail=allow)
        return None

    @staticmethod
    def true_beta(pair):
        """beta of a Langevin pair, or 2 D when the diffusion is a constant multiple of the identity."""
        if pair.beta is not None:
            return float(pair.beta)
        if not pair.has_constant_noise:
            return None
        diffusion = pair.diffusion_at(np.zeros((1, pair.dimension)))[0]
        if not np.allclose(diffusion, diffusion[0, 0] * np.eye(pair.dimension)):
            return None
        return 2.0 * float(diffusion[0, 0])

    @staticmethod
    def exact_drift_field(pair, grid, target):
        if target == InversionTarget.DRIFT_1D:
            return pair.drift_1d(grid.nodes[0])
        values = pair.drift_at(grid.points()).reshape(*grid.shape, grid.dimension)
        return np.moveaxis(values, -1, 0)

    @staticmethod
    def write_field(report, exact, path):
        """Nodes, recovered and exact drift components and the node mask as CSV."""
        grid = report.grid
        points = grid.points()
        recovered = np.ma.atleast_2d(report.recovered).reshape(-1, points.shape[0])
        exact = np.atleast_2d(exact).reshape(-1, points.shape[0])
        columns = {f'x{axis + 1}': points[:, axis] for axis in range(grid.dimension)}
        for i in range(recovered.shape[0]):
            columns[f'b{i + 1}'] = recovered[i].filled(np.nan)
            columns[f'exact_b{i + 1}'] = exact[i]
        columns['mask'] = np.ma.getmaskarray(recovered).any(axis=0).astype(int)
        pd.DataFrame(columns).to_csv(path, index=False, float_format='%.17g')

    @staticmethod
    def condition_check(report):
        return Check.at_most(
            'conditions', len(report.violations), 0, binding=False,
            detail=', '.join(report.failed_conditions) or report.label,
        )

    # simulate

    @classmethod
    def run_simulate(cls, config, run_dir, options):
        config.require_sections(('coefficients', 'simulation', 'sampling', 'grid'), ('coefficients', 'simulation'))
        pair = cls.build_pair(config)
        sim = cls.build_simulation(config, options)
        sampling = config.validate('sampling', SamplingSectionSerializer, required=False).validated_data
        grid = cls.grid_box(config, pair.dimension)

        box = grid[0] if grid else symmetric_box(cls.CONDITION_BOX_HALF_WIDTH, pair.dimension)
        conditions = ConditionService.check_conditions(pair, box, seed=options.seed)
        run_dir.write_json('conditions.json', ConditionReportSerializer(conditions).data)
        checks = [cls.condition_check(conditions)]

        measure = SimulationService.sample_invariant(pair, sim)
        if sampling['write_samples']:
            SimulationService.write_samples(measure, run_dir.path('samples.csv'))
        run_dir.write_json('summary.json', EmpiricalMeasureSummarySerializer(measure).data)

        if grid is None:
            logger.info(f"No grid for dimension {pair.dimension}; skipping density estimate")
            return checks
        box, nodes = grid
        if sampling['estimator'] == 'kde':
            estimate = DensityEstimationService.kde_density(
                measure, box, nodes, bandwidth_scale=sampling['bandwidth_scale'],
            )
        else:
            estimate = DensityEstimationService.histogram_density(measure, box, nodes)
        DensityService.write_grid(estimate, run_dir.path('estimate.csv'))

        reference = cls.reference_density(pair, box, nodes)
        if reference is None:
            return checks
        DensityService.write_grid(reference, run_dir.path('reference.csv'))
        report = DistanceService.distance(measure, reference, sampling['alpha'])
        run_dir.write_json('distance.json', DistanceReportSerializer(report).data)
        checks.append(Check.at_most('ks_reference', report.ks, report.threshold, detail=report.reference))
        return checks

    # density

    @classmethod
    def run_density(cls, config, run_dir, options):
        config.require_sections(('coefficients', 'density'), ('coefficients', 'density'))
        pair = cls.build_pair(config)
        section = config.validate('density', DensitySectionSerializer)
        data = section.validated_data
        box = section.box
        if len(box[0]) != pair.dimension:
            raise ConfigError(
                f'Density box has {len(box[0])} axes, the pair has dimension {pair.dimension}',
                section='density', key='lower', line=config.line('density', 'lower'),
            )

        allow = data['allow_heavy_tail']
        if data['method'] == DensitySource.CLOSED_FORM:
            if pair.dimension != 1:
                raise ConfigError(
                    'The closed form covers one-dimensional pairs; use method = gibbs',
                    section='density', key='method', line=config.line('density', 'method'),
                )
            grid = DensityService.closed_form_density_1d(pair, box, data['nodes'][0], allow_heavy_tail=allow)
        else:
            if not pair.is_langevin:
                raise ConfigError(
                    'Gibbs densities need a Langevin pair (potential and beta)',
                    section='density', key='method', line=config.line('density', 'method'),
                )
            allow = pair.heavy_tailed if allow is None else allow
            grid = DensityService.gibbs_density(pair, pair.beta, box, data['nodes'], allow_heavy_tail=allow)
        DensityService.write_grid(grid, run_dir.path('density.csv'))

        normalization = DensityService.normalization_constant(grid)
        run_dir.write_json('normalization.json', NormalizationSerializer(normalization).data)
        checks = [Check.at_most('normalization', abs(grid.total_mass - 1.0), NORMALIZATION_TOLERANCE)]

        if data['residual']:
            residual = FokkerPlanckService.fp_residual(grid, pair)
            run_dir.write_json('residual.json', ResidualReportSerializer(residual).data)
            checks.append(Check.at_most('weak_residual', residual.weak_max, cls.WEAK_RESIDUAL_TOLERANCE))
        return checks

    # invert

    @staticmethod
    def input_density(config, pair, source, box, nodes):
        if source == DensityInput.CLOSED_FORM:
            if pair.dimension != 1:
                raise ConfigError(
                    'Closed-form input needs a one-dimensional pair',
                    section='inversion', key='density', line=config.line('inversion', 'density'),
                )
            return DensityService.closed_form_density_1d(pair, box, nodes[0])
        if not pair.is_langevin:
            raise ConfigError(
                'Gibbs input needs a Langevin pair (potential and beta)',
                section='inversion', key='density', line=config.line('inversion', 'density'),
            )
        return DensityService.gibbs_density(pair, pair.beta, box, nodes, allow_heavy_tail=pair.heavy_tailed)

    @staticmethod
    def invert_grid(config, pair, data, p):
        target = data['target']
        if target == InversionTarget.DRIFT_1D:
            if pair.dimension != 1:
                raise ConfigError(
                    'drift_1d needs a one-dimensional pair',
                    section='inversion', key='target', line=config.line('inversion', 'target'),
                )
            return InversionService.invert_drift_1d(p, pair)
        if target == InversionTarget.DRIFT_LANGEVIN:
            beta = data.get('beta', pair.beta)
            if beta is None:
                raise ConfigError(
                    'drift_langevin needs beta', section='inversion', key='beta', line=config.line('inversion', 'beta'),
                )
            return InversionService.invert_drift_langevin(p, beta)
        if target == InversionTarget.BETA_ADDITIVE:
            return InversionService.invert_beta_additive(p, pair, data['aggregation'])
        return InversionService.invert_beta_langevin(p, pair, data['aggregation'])

    @classmethod
    def run_invert(cls, config, run_dir, options):
        config.require_sections(('coefficients', 'grid', 'inversion', 'simulation'), ('coefficients', 'inversion'))
        pair = cls.build_pair(config)
        data = config.validate('inversion', InversionSectionSerializer).validated_data
        grid = cls.grid_box(config, pair.dimension)
        if grid is None:
            raise ConfigError(f'Give a [grid] section for dimension {pair.dimension}', section='grid')
        box, nodes = grid

        if data['density'] == DensityInput.SAMPLES:
            measure = SimulationService.sample_invariant(pair, cls.build_simulation(config, options))
            report = InversionService.invert_beta_additive_from_samples(
                measure, pair, box, nodes,
                bandwidth_scale=data['bandwidth_scale'],
                resamples=data.get('bootstrap'),
                seed=options.seed,
                aggregation=data['aggregation'],
            )
            DensityService.write_grid(report.grid, run_dir.path('kde.csv'))
            p = None
        else:
            p = cls.input_density(config, pair, data['density'], box, nodes)
            DensityService.write_grid(p, run_dir.path('density.csv'))
            report = cls.invert_grid(config, pair, data, p)

        checks = []
        if report.is_scalar:
            run_dir.write_json('report.json', InversionReportSerializer(report).data)
            beta = cls.true_beta(pair)
            if beta is not None:
                checks.append(Check.at_most('relative_error', abs(report.value / beta - 1.0), data['tolerance']))
            checks.append(Check.at_most('masked_fraction', report.masked_fraction, 0.5, binding=False))
        else:
            exact = cls.exact_drift_field(pair, report.grid, data['target'])
            cls.write_field(report, exact, run_dir.path('drift.csv'))
            serializer = InversionReportSerializer(report, context={'field_file': 'drift.csv'})
            run_dir.write_json('report.json', serializer.data)
            binding = 'beta' not in data or data['beta'] == pair.beta
            checks.append(Check.at_most(
                'max_error', report.error_against(exact), data['tolerance'], binding=binding,
                detail='' if binding else f'beta argument {data["beta"]:g} differs from the pair',
            ))

        if data.get('perturbation'):
            result = InversionService.perturbation_experiment(
                p, lambda grid: cls.invert_grid(config, pair, data, grid), data['perturbation'], seed=options.seed,
            )
            run_dir.write_json('perturbation.json', PerturbationResultSerializer(result).data)
        return checks

    # counterexample

    @staticmethod
    def reference_law(config, kind, base, box, nodes):
        if kind == 'none':
            return None
        if kind in ('cauchy', 'normal'):
            if base.dimension != 1:
                raise ConfigError(
                    f'The {kind} reference is one-dimensional',
                    section='counterexample', key='reference', line=config.line('counterexample', 'reference'),
                )
            return stats.cauchy() if kind == 'cauchy' else stats.norm()
        if not base.is_langevin:
            raise ConfigError(
                'The gibbs reference needs a Langevin base pair',
                section='counterexample', key='reference', line=config.line('counterexample', 'reference'),
            )
        return DensityService.gibbs_density(base, base.beta, box, nodes, allow_heavy_tail=base.heavy_tailed)

    @classmethod
    def run_counterexample(cls, config, run_dir, options):
        config.require_sections(
            ('coefficients', 'counterexample', 'grid', 'simulation'), ('coefficients', 'counterexample'),
        )
        base = cls.build_pair(config)
        data = config.validate('counterexample', CounterexampleSectionSerializer).validated_data
        grid = cls.grid_box(config, base.dimension)
        if grid is None:
            raise ConfigError(f'Give a [grid] section for dimension {base.dimension}', section='grid')
        box, nodes = grid
        checks = []

        if data['family'] == 'gauge':
            family = CounterexampleService.gauge_diffusion_family(base, data['anchor'], data['offset'], box)
            run_dir.write_json('family.json', GaugeFamilySerializer(family).data)
            x = np.linspace(family.box[0], family.box[1], nodes[0])
            pd.DataFrame({
                'x': x,
                'base_diffusion': family.base_diffusion(x),
                'derived_diffusion': family.derived_diffusion(x),
            }).to_csv(run_dir.path('family.csv'), index=False, float_format='%.17g')
            checks.append(Check.at_most('certificate', family.certificate, cls.GAUGE_CERTIFICATE_TOLERANCE))
            checks.append(Check.at_most(
                'conditions', len(family.flags), 0, binding=False, detail=', '.join(family.flags),
            ))
            derived = family.derived
        else:
            skew = CoefficientService.skew_matrix(data['skew'], base.dimension)
            derived = CounterexampleService.skew_drift_family(base, skew)
            p = cls.reference_density(base, box, nodes)
            residual = FokkerPlanckService.fp_residual(p, derived)
            run_dir.write_json('family.json', {
                'base': base.name,
                'derived': derived.name,
                'skew': skew.tolist(),
                'residual': ResidualReportSerializer(residual).data,
            })
            checks.append(Check.at_most('stationarity', residual.weak_max, cls.WEAK_RESIDUAL_TOLERANCE))

        if data['verify']:
            sim = cls.build_simulation(config, options)
            reference = cls.reference_law(config, data['reference'], base, box, nodes)
            report = CounterexampleService.verify_nonidentifiability(
                base, derived, sim, box=box, reference=reference, alpha=data['alpha'],
            )
            run_dir.write_json('verdict.json', NonidentifiabilityReportSerializer(report).data)
            checks.append(Check.at_most(
                'indistinguishable', report.distance.ks, report.distance.threshold, detail=report.verdict,
            ))
            for name, reference_distance in report.reference_distances.items():
                checks.append(Check.at_most(
                    f'reference.{name}', reference_distance.ks, reference_distance.threshold,
                ))
        return checks

    # spde

    @staticmethod
    def write_section(section, report, reference, path):
        states = section.states()
        columns = {f'a{k}': states[..., k - 1].ravel() for k in section.modes}
        columns['log_ratio'] = section.values.ravel()
        for row, k in enumerate(section.modes):
            columns[f'drift_{k}'] = report.recovered[row].filled(np.nan).ravel()
            columns[f'projection_{k}'] = reference[row].ravel()
        columns['mask'] = np.ma.getmaskarray(report.recovered).any(axis=0).ravel().astype(int)
        pd.DataFrame(columns).to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def run_spde(cls, config, run_dir, options):
        config.require_sections(('spde', 'simulation'), ('spde', 'simulation'))
        section = config.validate('spde', SpdeSectionSerializer)
        data = section.validated_data
        cfg = section.build_config(cls.build_simulation(config, options))
        reaction = cfg.reaction

        conditions = SPDEStatisticsService.check_reaction_conditions(reaction, seed=options.seed)
        run_dir.write_json('conditions.json', ReactionConditionReportSerializer(conditions).data)
        checks = [cls.condition_check(conditions)]

        measure = SPDEService.sample_spde(cfg)
        SPDEService.write_mode_samples(measure, run_dir.path('modes.csv'))
        if data['snapshots']:
            SPDEService.write_field_snapshots(
                measure, run_dir.path('snapshots.csv'), cfg.quadrature(), count=data['snapshots'],
            )

        alpha = reaction.linear_rate
        statistics = SPDEStatisticsService.mode_statistics(measure, cfg.beta, alpha=alpha or 0.0)
        run_dir.write_json('mode_statistics.json', ModeStatisticsSerializer(statistics).data)
        pd.DataFrame({
            'mode': np.arange(1, cfg.n_modes + 1),
            'eigenvalue': cfg.eigenvalues,
            'variance': statistics.variances,
            'expected': statistics.expected,
            'relative_error': statistics.relative_errors,
        }).to_csv(run_dir.path('mode_variances.csv'), index=False, float_format='%.17g')
        if alpha is not None:
            modes = min(data['variance_modes'], cfg.n_modes)
            checks += [
                Check.at_most('variance', statistics.max_relative_error(modes), data['variance_tolerance'],
                              detail=f'modes 1..{modes}'),
                Check.at_most('trace', statistics.trace_error, data['trace_tolerance']),
                Check.at_most('cross_correlation', statistics.max_cross_correlation, statistics.correlation_bound,
                              binding=False),
            ]

        try:
            beta_report = SPDEInversionService.invert_beta_spde(
                measure, reaction, modes=data['invert_modes'],
                bandwidth_scale=data['bandwidth_scale'], quadrature_nodes=cfg.quadrature_nodes,
            )
        except InsufficientSupportError as exc:
            if not options.quick:
                raise
            checks.append(Check.from_error('beta_relative_error', exc))
        else:
            run_dir.write_json('beta_report.json', InversionReportSerializer(beta_report).data)
            checks.append(Check.at_most(
                'beta_relative_error', abs(beta_report.value / cfg.beta - 1.0), data['beta_tolerance'],
            ))

        if data.get('section_modes'):
            drift_section = SPDEInversionService.log_ratio_section(
                reaction, cfg.beta, data['section_modes'], data['section_half_width'], data['section_nodes'],
                cfg.n_modes, cfg.quadrature_nodes,
            )
            drift_report = SPDEInversionService.invert_drift_spde(
                drift_section, reaction=reaction, quadrature_nodes=cfg.quadrature_nodes,
            )
            projection = SPDEInversionService.reaction_section_projection(drift_section, reaction, cfg.quadrature_nodes)
            cls.write_section(drift_section, drift_report, projection, run_dir.path('drift_section.csv'))
            run_dir.write_json(
                'drift_report.json',
                InversionReportSerializer(drift_report, context={'field_file': 'drift_section.csv'}).data,
            )
            checks.append(Check.at_most(
                'section_drift', drift_report.thresholds['reference_error'], cls.SECTION_DRIFT_TOLERANCE,
            ))

        if data['partition_samples']:
            estimate = SPDEStatisticsService.partition_function(
                reaction, cfg.beta, cfg.n_modes, data['partition_samples'], seed=options.seed,
            )
            run_dir.write_json('partition.json', PartitionEstimateSerializer(estimate).data)
            checks.append(Check.at_least(
                'partition_weight_ess', estimate.weight_ess_fraction,
                SPDEStatisticsService.PARTITION_MIN_ESS_FRACTION, binding=False,
            ))
        return checks
