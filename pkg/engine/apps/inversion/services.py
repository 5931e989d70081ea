"""
Services for the inversion app.
Recovery of drift and noise intensity from invariant densities, the two
non-identifiability constructions (gauge diffusions, skew drifts) and
their verification by simulation.
"""

import logging
import math
from dataclasses import replace

import numpy as np
import sympy as sp
from scipy import integrate, ndimage, stats
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from apps.coefficients.models import CoefficientKind, CoefficientPair, as_points
from apps.coefficients.services import CoefficientService, ConditionService
from apps.density.models import DensityGrid, DensitySource
from apps.density.services import DensityService, GridOperators
from apps.simulation.services import DistanceService, SimulationService
from core.utils.boxes import as_box, symmetric_box
from core.utils.exceptions import (
    CoefficientDomainError,
    InsufficientSupportError,
    InvalidFamilyError,
    NumericalDomainError,
)
from core.utils.numerics import numerics_setting

from .models import (
    Aggregation,
    GaugeFamily,
    InversionReport,
    InversionTarget,
    NonidentifiabilityReport,
    PerturbationResult,
    Verdict,
)

logger = logging.getLogger(__name__)


class InversionService:
    """Drift and noise-intensity recovery from invariant densities and samples."""

    FORMULAS = {
        InversionTarget.DRIFT_1D: "b = D (ln pD)'",
        InversionTarget.DRIFT_LANGEVIN: 'b = (beta/2) grad ln p',
        InversionTarget.BETA_ADDITIVE: 'beta = 2 div(b p) / lap p',
        InversionTarget.BETA_LANGEVIN: 'beta = 2 b_i / d_i ln p',
        InversionTarget.BETA_RATIO: 'beta1/beta2 = d_i ln p2 / d_i ln p1',
    }
    SAMPLE_LAPLACIAN_THRESHOLD = 0.05
    SAMPLE_BANDWIDTH_FRACTION = 0.25
    TRIM_PROPORTION = 0.1

    # Helpers

    @staticmethod
    def _interior(shape, margin=1):
        """Boolean array that is False on the outermost `margin` layers."""
        inside = np.zeros(shape, dtype=bool)
        inside[tuple(slice(margin, -margin) for _ in shape)] = True
        return inside

    @classmethod
    def _aggregate(cls, estimates, aggregation):
        estimates = np.sort(np.asarray(estimates, dtype=float))
        if aggregation == Aggregation.TRIMMED_MEAN:
            return float(stats.trim_mean(estimates, cls.TRIM_PROPORTION))
        if aggregation != Aggregation.MEDIAN:
            raise NumericalDomainError(f'Unknown aggregation {aggregation!r}')
        return float(np.median(estimates))

    @staticmethod
    def _iqr(values):
        values = np.asarray(values, dtype=float)
        return float(stats.iqr(values)) if values.size else 0.0

    @staticmethod
    def _require_support(count, label):
        minimum = numerics_setting('MIN_ADMISSIBLE_NODES')
        if count < minimum:
            raise InsufficientSupportError(
                f'{label}: only {count} admissible nodes (need {minimum})', admissible=count,
            )

    @staticmethod
    def _check_masked_fraction(fraction, label):
        limit = numerics_setting('MASKED_FRACTION_LIMIT')
        if fraction > limit:
            raise InsufficientSupportError(
                f'{label}: {fraction:.1%} of nodes masked (limit {limit:.0%})', masked_fraction=fraction,
            )

    @staticmethod
    def _drift_field(grid, drift):
        """Drift on the grid nodes as (d, *shape) from a pair or a callable on (N, d) points."""
        evaluate = drift.drift_at if isinstance(drift, CoefficientPair) else drift
        if isinstance(drift, CoefficientPair) and drift.dimension != grid.dimension:
            raise CoefficientDomainError(
                f'Pair dimension {drift.dimension} does not match grid dimension {grid.dimension}'
            )
        values = np.asarray(evaluate(grid.points()), dtype=float).reshape(-1, grid.dimension)
        if not np.all(np.isfinite(values)):
            raise CoefficientDomainError('Drift is not finite on the grid')
        return np.moveaxis(values.reshape(*grid.shape, grid.dimension), -1, 0)

    @staticmethod
    def _diffusion_1d(grid, diffusion):
        """Scalar diffusion on a 1D grid from a pair, a callable or node values."""
        x = grid.nodes[0]
        if isinstance(diffusion, CoefficientPair):
            values = diffusion.diffusion_1d(x)
        elif callable(diffusion):
            values = np.asarray(diffusion(x), dtype=float)
        else:
            values = np.asarray(diffusion, dtype=float)
        values = np.broadcast_to(values, x.shape).astype(float)
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise CoefficientDomainError('Diffusion must be positive on the grid')
        return values

    # Drift inversion

    @classmethod
    def invert_drift_1d(cls, p, diffusion):
        """
        Drift b = D (ln(pD))' of a one-dimensional diffusion, given its
        invariant density and its diffusion coefficient.

        Args:
            p: one-dimensional DensityGrid
            diffusion: CoefficientPair, callable of x or values on the nodes

        Returns:
            InversionReport whose `recovered` is a masked array on p's nodes.

        Raises:
            InsufficientSupportError: more than half of the nodes masked
        """
        if p.dimension != 1:
            raise NumericalDomainError(f'invert_drift_1d needs a 1D density, got d={p.dimension}')
        values = cls._diffusion_1d(p, diffusion)
        log_flux = np.log(np.maximum(p.values, np.finfo(float).tiny) * values)
        drift = values * GridOperators.partial(log_flux, p.spacing[0], 0)

        mask = GridOperators.log_mask(p) | ~cls._interior(p.shape)
        fraction = float(mask.mean())
        cls._check_masked_fraction(fraction, 'Drift inversion')
        recovered = np.ma.masked_array(drift, mask=mask)
        estimates = recovered.compressed()
        logger.info(f"Drift inverted on {estimates.size} nodes, masked fraction {fraction:.3f}")
        return InversionReport(
            target=InversionTarget.DRIFT_1D,
            recovered=recovered,
            pointwise_estimates=estimates,
            dispersion=cls._iqr(estimates),
            masked_fraction=fraction,
            formula=cls.FORMULAS[InversionTarget.DRIFT_1D],
            admissible_nodes=int(estimates.size),
            thresholds={'p_floor_relative': numerics_setting('P_FLOOR_RELATIVE')},
            grid=p,
        )

    @classmethod
    def invert_drift_langevin(cls, p, beta):
        """
        Gradient drift (beta/2) grad ln p. `recovered` has shape (d, *p.shape)
        with the floor and boundary nodes masked.
        """
        if beta <= 0:
            raise NumericalDomainError(f'beta must be positive, got {beta}')
        score = GridOperators.grad_log(p)
        node_mask = np.ma.getmaskarray(score).any(axis=0) | ~cls._interior(p.shape)
        fraction = float(node_mask.mean())
        cls._check_masked_fraction(fraction, 'Langevin drift inversion')

        field = 0.5 * beta * np.ma.getdata(score)
        recovered = np.ma.masked_array(field, mask=np.broadcast_to(node_mask, field.shape).copy())
        estimates = recovered.compressed()
        return InversionReport(
            target=InversionTarget.DRIFT_LANGEVIN,
            recovered=recovered,
            pointwise_estimates=estimates,
            dispersion=cls._iqr(estimates),
            masked_fraction=fraction,
            formula=cls.FORMULAS[InversionTarget.DRIFT_LANGEVIN],
            admissible_nodes=int((~node_mask).sum()),
            thresholds={'beta': float(beta), 'p_floor_relative': numerics_setting('P_FLOOR_RELATIVE')},
            grid=p,
        )

    @staticmethod
    def drift_difference(p1, p2, beta):
        """
        |b1 - b2| = (beta/2) |grad ln p1 - grad ln p2| for gradient drifts
        sharing one beta. Returns the Euclidean norm as a masked array.
        """
        if p1.shape != p2.shape or not np.allclose(p1.lower, p2.lower) or not np.allclose(p1.upper, p2.upper):
            raise NumericalDomainError('Densities must share one grid')
        diff = 0.5 * beta * (GridOperators.grad_log(p1) - GridOperators.grad_log(p2))
        return np.ma.sqrt(np.ma.sum(diff ** 2, axis=0))

    # Noise-intensity inversion

    @classmethod
    def _additive_quotients(cls, p, drift):
        """Pointwise 2 div(b p) / lap p on admissible nodes and their count."""
        flux = cls._drift_field(p, drift) * p.values
        div = GridOperators.divergence(flux, p.spacing)
        lap = GridOperators.laplacian(p)
        threshold = numerics_setting('EPS_LAP') * float(np.max(np.abs(lap)))
        admissible = (np.abs(lap) > threshold) & ~GridOperators.log_mask(p) & cls._interior(p.shape)
        return 2.0 * div[admissible] / lap[admissible], admissible, threshold

    @classmethod
    def invert_beta_additive(cls, p, drift, aggregation=Aggregation.MEDIAN):
        """
        Noise intensity of dX = b dt + sqrt(beta) dW from its invariant density.

        The stationary balance (beta/2) lap p = div(b p) gives one estimate per
        node where |lap p| clears the relative threshold; the report aggregates
        them (median by default) and keeps the IQR as dispersion.

        Raises:
            InsufficientSupportError: fewer admissible nodes than the minimum
        """
        estimates, admissible, threshold = cls._additive_quotients(p, drift)
        cls._require_support(estimates.size, 'Additive beta inversion')
        recovered = cls._aggregate(estimates, aggregation)
        report = InversionReport(
            target=InversionTarget.BETA_ADDITIVE,
            recovered=recovered,
            pointwise_estimates=np.sort(estimates),
            dispersion=cls._iqr(estimates),
            masked_fraction=float(1.0 - admissible.mean()),
            formula=cls.FORMULAS[InversionTarget.BETA_ADDITIVE],
            aggregation=aggregation,
            admissible_nodes=int(estimates.size),
            thresholds={'eps_lap': numerics_setting('EPS_LAP'), 'laplacian_floor': threshold},
            grid=p,
        )
        logger.info(f"Additive beta inversion: beta={recovered:.6g}, IQR={report.dispersion:.3e}")
        return report

    @classmethod
    def _langevin_quotients(cls, p, drift):
        """Per-axis arrays of 2 b_i / d_i ln p on admissible nodes."""
        score = GridOperators.grad_log(p)
        b = cls._drift_field(p, drift)
        node_ok = ~np.ma.getmaskarray(score).any(axis=0) & cls._interior(p.shape)
        if not node_ok.any():
            raise InsufficientSupportError('Every node is masked', admissible=0)
        eps = numerics_setting('EPS_GRAD')
        per_axis = []
        for i in range(p.dimension):
            component = np.ma.getdata(score[i])
            admissible = node_ok & (np.abs(component) > eps * float(np.max(np.abs(component[node_ok]))))
            per_axis.append((b[i][admissible], component[admissible]))
        return per_axis, node_ok

    @classmethod
    def invert_beta_langevin(cls, p, drift, aggregation=Aggregation.MEDIAN):
        """
        Noise intensity of a gradient-drift diffusion: beta = 2 b_i / d_i ln p,
        pooled over axes. `per_axis` holds the aggregate of each axis alone.
        """
        per_axis, node_ok = cls._langevin_quotients(p, drift)
        masked_fraction = float(1.0 - node_ok.mean())
        cls._check_masked_fraction(masked_fraction, 'Langevin beta inversion')
        axis_estimates = [2.0 * b / score for b, score in per_axis]
        estimates = np.concatenate(axis_estimates)
        cls._require_support(estimates.size, 'Langevin beta inversion')
        recovered = cls._aggregate(estimates, aggregation)
        return InversionReport(
            target=InversionTarget.BETA_LANGEVIN,
            recovered=recovered,
            pointwise_estimates=np.sort(estimates),
            dispersion=cls._iqr(estimates),
            masked_fraction=masked_fraction,
            formula=cls.FORMULAS[InversionTarget.BETA_LANGEVIN],
            aggregation=aggregation,
            admissible_nodes=int(estimates.size),
            thresholds={'eps_grad': numerics_setting('EPS_GRAD')},
            per_axis=tuple(cls._aggregate(e, aggregation) if e.size else math.nan for e in axis_estimates),
            grid=p,
        )

    @classmethod
    def beta_ratio(cls, p1, p2, drift):
        """
        beta1 / beta2 for one gradient drift, pointwise d_i ln p2 / d_i ln p1,
        median over nodes admissible for both densities.
        """
        s1, s2 = GridOperators.grad_log(p1), GridOperators.grad_log(p2)
        node_ok = ~(np.ma.getmaskarray(s1).any(axis=0) | np.ma.getmaskarray(s2).any(axis=0)) & cls._interior(p1.shape)
        eps = numerics_setting('EPS_GRAD')
        ratios = []
        for i in range(p1.dimension):
            a, b = np.ma.getdata(s1[i]), np.ma.getdata(s2[i])
            scale = eps * float(np.max(np.abs(a[node_ok])))
            admissible = node_ok & (np.abs(a) > scale) & (np.abs(b) > scale)
            ratios.append(b[admissible] / a[admissible])
        estimates = np.concatenate(ratios)
        cls._require_support(estimates.size, 'Beta ratio')
        return InversionReport(
            target=InversionTarget.BETA_RATIO,
            recovered=cls._aggregate(estimates, Aggregation.MEDIAN),
            pointwise_estimates=np.sort(estimates),
            dispersion=cls._iqr(estimates),
            masked_fraction=float(1.0 - node_ok.mean()),
            formula=cls.FORMULAS[InversionTarget.BETA_RATIO],
            aggregation=Aggregation.MEDIAN,
            admissible_nodes=int(estimates.size),
            thresholds={'eps_grad': eps},
        )

    @classmethod
    def beta_ratio_additive(cls, p1, p2, drift):
        """
        beta1 / beta2 for one additive drift:
        (div(b p1) / lap p1) / (div(b p2) / lap p2), median over common nodes.
        """
        q1, a1, _ = cls._additive_quotients(p1, drift)
        q2, a2, _ = cls._additive_quotients(p2, drift)
        both = a1 & a2
        full1 = np.full(p1.shape, np.nan)
        full2 = np.full(p2.shape, np.nan)
        full1[a1] = q1
        full2[a2] = q2
        estimates = full1[both] / full2[both]
        estimates = estimates[np.isfinite(estimates)]
        cls._require_support(estimates.size, 'Additive beta ratio')
        return InversionReport(
            target=InversionTarget.BETA_RATIO,
            recovered=cls._aggregate(estimates, Aggregation.MEDIAN),
            pointwise_estimates=np.sort(estimates),
            dispersion=cls._iqr(estimates),
            masked_fraction=float(1.0 - both.mean()),
            formula='beta1/beta2 = (div(b p1)/lap p1) / (div(b p2)/lap p2)',
            aggregation=Aggregation.MEDIAN,
            admissible_nodes=int(estimates.size),
            thresholds={'eps_lap': numerics_setting('EPS_LAP')},
        )

    # Sample-based inversion

    @staticmethod
    def _smoothed_counts(samples, weights, edges, sigma):
        counts, _ = np.histogramdd(samples, bins=edges, weights=weights)
        return ndimage.gaussian_filter(counts, sigma=sigma, mode='constant', truncate=5.0)

    @classmethod
    def _sample_beta(cls, samples, drift_values, edges, sigma, steps, n_total, aggregation):
        """
        Both the density and the flux b p are smoothed with the same kernel, so
        (beta/2) lap (p*K) = div((b p)*K) holds exactly for the smoothed fields.
        """
        scale = 1.0 / (n_total * float(np.prod(steps)))
        density = cls._smoothed_counts(samples, None, edges, sigma) * scale
        flux = np.stack([
            cls._smoothed_counts(samples, drift_values[:, i], edges, sigma) * scale
            for i in range(samples.shape[1])
        ])
        lap = GridOperators.laplacian(density, steps)
        div = GridOperators.divergence(flux, steps)
        interior = cls._interior(density.shape, margin=2)
        threshold = cls.SAMPLE_LAPLACIAN_THRESHOLD * float(np.max(np.abs(lap[interior])))
        admissible = interior & (np.abs(lap) > threshold)
        estimates = 2.0 * div[admissible] / lap[admissible]
        if estimates.size == 0:
            return math.nan, estimates, density
        return cls._aggregate(estimates, aggregation), estimates, density

    @classmethod
    def invert_beta_additive_from_samples(
        cls, measure, drift, box, nodes, bandwidth_scale=1.0, resamples=None, seed=0, aggregation=Aggregation.MEDIAN,
    ):
        """
        Recover beta from equilibrium samples of an additive-noise diffusion.

        Args:
            measure: EmpiricalMeasure
            drift: CoefficientPair or callable on (N, d) points
            box: estimation box (lower, upper)
            nodes: odd node count or per-axis counts
            bandwidth_scale: multiplies the kernel width, a quarter of the
                sample standard deviation per axis
            resamples: bootstrap resamples for the dispersion (default BOOTSTRAP_RESAMPLES)
            seed: bootstrap seed

        Returns:
            InversionReport flagged statistical, with bootstrap dispersion.
        """
        resamples = numerics_setting('BOOTSTRAP_RESAMPLES') if resamples is None else resamples
        lower, upper, shape, _ = DensityService.grid_nodes(box, nodes)
        if lower.shape[0] != measure.dimension:
            raise NumericalDomainError('Grid dimension differs from sample dimension')
        if measure.size < numerics_setting('MIN_DENSITY_SAMPLES'):
            raise InsufficientSupportError(f'{measure.size} samples are too few for sample-based inversion')

        steps = (upper - lower) / (np.array(shape) - 1)
        edges = [np.linspace(lo - h / 2, hi + h / 2, n + 1) for lo, hi, h, n in zip(lower, upper, steps, shape)]
        bandwidth = bandwidth_scale * cls.SAMPLE_BANDWIDTH_FRACTION * measure.samples.std(axis=0, ddof=1)
        sigma = bandwidth / steps
        evaluate = drift.drift_at if isinstance(drift, CoefficientPair) else drift
        drift_values = np.asarray(evaluate(measure.samples), dtype=float).reshape(measure.size, measure.dimension)

        recovered, estimates, density = cls._sample_beta(
            measure.samples, drift_values, edges, sigma, steps, measure.size, aggregation,
        )
        cls._require_support(estimates.size, 'Sample-based beta inversion')

        rng = np.random.default_rng(seed)
        boot = []
        for _ in range(resamples):
            idx = rng.integers(0, measure.size, measure.size)
            value, _, _ = cls._sample_beta(
                measure.samples[idx], drift_values[idx], edges, sigma, steps, measure.size, aggregation,
            )
            boot.append(value)
        boot = np.asarray(boot)
        boot_dispersion = float(np.nanstd(boot, ddof=1)) if resamples > 1 else 0.0

        grid = DensityGrid(
            lower=lower, upper=upper, values=np.maximum(density, 0.0), source=DensitySource.KDE,
            metadata={'bandwidth': bandwidth.tolist(), 'samples': measure.size},
        )
        logger.info(
            f"Sample-based beta: {recovered:.5g} (bootstrap sd {boot_dispersion:.3g}, {resamples} resamples)",
            extra={'samples': measure.size},
        )
        return InversionReport(
            target=InversionTarget.BETA_ADDITIVE,
            recovered=recovered,
            pointwise_estimates=np.sort(estimates),
            dispersion=cls._iqr(estimates),
            masked_fraction=float(1.0 - estimates.size / np.prod(shape)),
            formula=cls.FORMULAS[InversionTarget.BETA_ADDITIVE] + ' (kernel-smoothed)',
            aggregation=aggregation,
            admissible_nodes=int(estimates.size),
            thresholds={'laplacian_relative': cls.SAMPLE_LAPLACIAN_THRESHOLD, 'bandwidth': bandwidth.tolist()},
            statistical=True,
            bootstrap_dispersion=boot_dispersion,
            grid=grid,
        )

    # Perturbation experiments

    @staticmethod
    def _report_error(report, baseline):
        if report.is_scalar:
            return abs(report.value - baseline.value)
        diff = np.ma.abs(report.recovered - baseline.recovered)
        return float(diff.max()) if diff.count() else math.nan

    @classmethod
    def perturbation_experiment(cls, p, inverter, noise_levels, seed=0):
        """
        Multiply density values by (1 + eps xi), xi standard normal, and record
        the inversion error against the unperturbed inversion for each eps.

        Args:
            p: DensityGrid
            inverter: callable DensityGrid -> InversionReport
            noise_levels: relative noise amplitudes
            seed: noise seed
        """
        baseline = inverter(p)
        rng = np.random.default_rng(seed)
        errors = []
        for level in noise_levels:
            noise = rng.standard_normal(p.shape)
            values = np.maximum(p.values * (1.0 + level * noise), 0.0)
            try:
                errors.append(cls._report_error(inverter(p.with_values(values)), baseline))
            except InsufficientSupportError as exc:
                logger.warning(f"Perturbation level {level}: {exc.detail}")
                errors.append(math.nan)
        logger.info(f"Perturbation experiment: levels={list(noise_levels)}, errors={errors}")
        return PerturbationResult(
            noise_levels=tuple(float(v) for v in noise_levels),
            errors=tuple(float(e) for e in errors),
            baseline=baseline,
            seed=seed,
        )


class _GridPrimitive:
    """U2 on a fine grid over the box, extended outside it by adaptive quadrature."""

    DEFAULT_NODES = 4001

    def __init__(self, integrand, lower, upper, anchor, nodes=DEFAULT_NODES):
        self.integrand = integrand
        self.x = np.linspace(lower, upper, nodes)
        values = integrate.cumulative_simpson(integrand(self.x), x=self.x, initial=0.0)
        self.values = values - CubicSpline(self.x, values)(anchor)
        self.spline = CubicSpline(self.x, self.values)

    def _outside(self, point):
        edge = self.x[0] if point < self.x[0] else self.x[-1]
        base = self.values[0] if point < self.x[0] else self.values[-1]
        return base + integrate.quad(lambda s: float(self.integrand(np.array([s]))[0]), edge, point)[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.spline(x)
        outside = (x < self.x[0]) | (x > self.x[-1])
        if np.any(outside):
            out[outside] = [self._outside(point) for point in x[outside]]
        return out


class CounterexampleService:
    """Gauge diffusion and skew drift families sharing an invariant law, and their verification by simulation."""

    # Gauge family of diffusions

    @staticmethod
    def _symbolic_primitive(pair, anchor):
        """U2 = int_{x0}^x b / D2 when the pair carries sympy expressions, else None."""
        expressions = pair.expressions
        if not expressions or pair.noise_dimension != 1:
            return None
        x = expressions['symbols'][0]
        drift = expressions['drift'][0]
        sigma = expressions['sigma'][0, 0]
        diffusion = sp.simplify(sigma ** 2 / 2)
        t = sp.Symbol('t', real=True)
        integrand = (drift / diffusion).subs(x, t)
        primitive = sp.integrate(integrand, (t, sp.nsimplify(anchor), x))
        if primitive.has(sp.Integral):
            return None
        return x, diffusion, sp.simplify(primitive)

    @classmethod
    def gauge_diffusion_family(cls, base, anchor, offset, box, n_nodes=20001):
        """
        Diffusion D1 = D2 (1 + C e^{-U2}) with C = offset / D2(x0), U2 the
        primitive of b / D2 vanishing at x0. (b, D1) and (b, D2) have the same
        invariant density; offset = D1(x0) - D2(x0).

        Args:
            base: one-dimensional CoefficientPair (b, D2)
            anchor: x0 inside the box
            offset: D1(x0) - D2(x0), strictly above -D2(x0)
            box: working box (lower, upper)
            n_nodes: nodes of the certificate grid

        Raises:
            InvalidFamilyError: offset <= -D2(x0), or D1 not positive on the box
        """
        if base.dimension != 1:
            raise InvalidFamilyError(f'Gauge families are one-dimensional, got d={base.dimension}')
        lower, upper = (float(v[0]) for v in as_box(*box))
        if not lower < anchor < upper:
            raise InvalidFamilyError(f'Anchor {anchor} lies outside the box [{lower}, {upper}]')
        d2_anchor = float(base.diffusion_1d([anchor])[0])
        if offset <= -d2_anchor:
            raise InvalidFamilyError(
                f'Offset {offset} must exceed -D2(x0) = {-d2_anchor:.6g}', offset=offset,
            )
        constant = offset / d2_anchor

        symbolic = cls._symbolic_primitive(base, anchor)
        derived_expression = None
        if symbolic is not None:
            x, diffusion, primitive = symbolic
            derived_expression = sp.simplify(diffusion * (1 + sp.nsimplify(constant) * sp.exp(-primitive)))
            derived_fn = sp.lambdify(x, derived_expression, modules='numpy')

            def derived_diffusion(points):
                return np.broadcast_to(derived_fn(points), np.shape(points)).astype(float)
        else:
            primitive_fn = _GridPrimitive(lambda s: base.drift_1d(s) / base.diffusion_1d(s), lower, upper, anchor)

            def derived_diffusion(points):
                return base.diffusion_1d(points) * (1.0 + constant * np.exp(-primitive_fn(points)))

        nodes = np.linspace(lower, upper, n_nodes)
        with np.errstate(over='ignore'):
            d1 = derived_diffusion(nodes)
        if not np.all(np.isfinite(d1)) or np.any(d1 <= 0):
            bad = nodes[np.argmin(np.where(np.isfinite(d1), d1, -np.inf))]
            raise InvalidFamilyError(
                f'Derived diffusion is not positive at x={bad:.6g}; ellipticity lost', point=float(bad),
            )

        def sigma(points):
            x = as_points(points, 1)[:, 0]
            return np.sqrt(2.0 * derived_diffusion(x)).reshape(-1, 1, 1)

        metadata = {'heavy_tailed': base.heavy_tailed, 'gauge_offset': float(offset), 'gauge_anchor': float(anchor)}
        if derived_expression is not None:
            metadata['expressions'] = {
                'symbols': base.expressions['symbols'],
                'drift': base.expressions['drift'],
                'sigma': sp.Matrix([[sp.sqrt(2 * derived_expression)]]),
                'potential': None,
            }
        derived = CoefficientPair(
            dimension=1,
            noise_dimension=1,
            drift=base.drift,
            sigma=sigma,
            kind=CoefficientKind.GENERAL,
            name=f'{base.name}-gauge',
            metadata=metadata,
        )

        heavy = base.heavy_tailed
        p_base = DensityService.closed_form_density_1d(base, (lower, upper), n_nodes, allow_heavy_tail=heavy)
        p_derived = DensityService.closed_form_density_1d(derived, (lower, upper), n_nodes, allow_heavy_tail=heavy)
        certificate = float(np.max(np.abs(p_base.values - p_derived.values)))
        advisories = tuple(ConditionService.check_conditions(pair, (lower, upper)) for pair in (base, derived))

        family = GaugeFamily(
            base=base,
            derived=derived,
            anchor=float(anchor),
            offset=float(offset),
            constant=float(constant),
            box=(lower, upper),
            certificate=certificate,
            symbolic=symbolic is not None,
            derived_expression=derived_expression,
            advisories=advisories,
        )
        if family.flags:
            logger.warning(f"Gauge family of {base.name}: sampled conditions fail ({', '.join(family.flags)})")
        logger.info(
            f"Gauge family of {base.name}: C={constant:.6g}, certificate={certificate:.3e}, "
            f"{'symbolic' if family.symbolic else 'grid'} primitive"
        )
        return family

    @classmethod
    def gauge_equivalent(cls, base, candidate, anchor, box, n_nodes=20001, tol=1e-8):
        """
        Whether a candidate diffusion is the gauge partner of (b, D2) with the
        offset it shows at x0. Returns (equivalent, max relative deviation).

        Args:
            base: one-dimensional CoefficientPair (b, D2)
            candidate: CoefficientPair or callable giving D1(x)
        """
        evaluate = candidate.diffusion_1d if isinstance(candidate, CoefficientPair) else candidate
        if isinstance(candidate, CoefficientPair):
            nodes = np.linspace(*(float(v[0]) for v in as_box(*box)), 257)
            if not np.allclose(candidate.drift_1d(nodes), base.drift_1d(nodes), rtol=0.0, atol=tol):
                return False, math.inf
        offset = float(np.asarray(evaluate(np.array([anchor])), dtype=float)[0]) - float(base.diffusion_1d([anchor])[0])
        try:
            family = cls.gauge_diffusion_family(base, anchor, offset, box, n_nodes)
        except InvalidFamilyError:
            return False, math.inf
        nodes = np.linspace(*family.box, n_nodes)
        expected = family.derived_diffusion(nodes)
        deviation = float(np.max(np.abs(np.asarray(evaluate(nodes), dtype=float) - expected) / expected))
        return deviation <= tol, deviation

    # Skew drift family

    @staticmethod
    def _score_interpolator(density):
        score = GridOperators.grad_log(density)
        data = np.ma.getdata(score)
        interpolators = [
            RegularGridInterpolator(density.nodes, data[i], bounds_error=False, fill_value=None)
            for i in range(density.dimension)
        ]
        return lambda points: np.stack([f(points) for f in interpolators], axis=1)

    @classmethod
    def skew_drift_family(cls, pair, skew, density=None):
        """
        Drift b2 = b1 - J grad ln p with J constant and skew; (b2, sigma) keeps
        the invariant density p of (b1, sigma).

        Args:
            pair: Langevin CoefficientPair, or any pair when `density` is given
            skew: skew matrix, or its strictly upper-triangular entries
            density: optional DensityGrid whose score replaces the analytic one

        Raises:
            InvalidFamilyError: d < 2, J not skew, or no score available
        """
        d = pair.dimension
        if d < 2:
            raise InvalidFamilyError('Skew drift families need d >= 2')
        matrix = np.asarray(skew, dtype=float)
        if matrix.ndim != 2:
            matrix = CoefficientService.skew_matrix(matrix, d)
        if matrix.shape != (d, d) or not CoefficientService.is_skew(matrix):
            raise InvalidFamilyError(f'J must be a skew {d}x{d} matrix')

        if density is not None:
            score = cls._score_interpolator(density)
        elif pair.is_langevin:
            score = lambda points: (2.0 / pair.beta) * pair.drift_at(points)  # noqa: E731
        else:
            raise InvalidFamilyError(f'{pair.name} is not Langevin and no density was given')

        def drift(points):
            points = as_points(points, d)
            return pair.drift_at(points) - score(points) @ matrix.T

        metadata = {'heavy_tailed': pair.heavy_tailed, 'skew': matrix.tolist()}
        expressions = pair.expressions
        if expressions and density is None:
            b1 = sp.Matrix(expressions['drift'])
            j = sp.Matrix(matrix.tolist()).applyfunc(sp.nsimplify)
            b2 = sp.simplify(b1 - j * b1 * sp.Rational(2) / sp.nsimplify(pair.beta))
            metadata['expressions'] = {
                'symbols': expressions['symbols'],
                'drift': list(b2),
                'sigma': expressions['sigma'],
                'potential': None,
            }
        return CoefficientPair(
            dimension=d,
            noise_dimension=pair.noise_dimension,
            drift=drift,
            sigma=pair.sigma,
            kind=CoefficientKind.ADDITIVE if pair.has_constant_noise else CoefficientKind.GENERAL,
            name=f'{pair.name}-skew',
            metadata=metadata,
        )

    # Verification by simulation

    @staticmethod
    def verify_nonidentifiability(pair_a, pair_b, cfg, box=None, reference=None, alpha=0.05):
        """
        Simulate both pairs to equilibrium and compare the empirical measures.

        The verdict is indistinguishable iff every KS statistic (per axis, and
        along the projection battery for d > 1) is below the two-sample
        threshold. Sampled condition checks never change the verdict; their
        failures are listed per pair in the report diagnostics.

        Args:
            reference: optional law (CDF, frozen scipy distribution or grid)
                each measure is also compared against
        """
        if pair_a.dimension != pair_b.dimension:
            raise NumericalDomainError('Pairs of different dimensions')
        box = box or symmetric_box(5.0, pair_a.dimension)
        advisories = tuple(ConditionService.check_conditions(pair, box) for pair in (pair_a, pair_b))
        for report in advisories:
            if not report.passed:
                logger.warning(
                    f"{report.pair_name}: sampled conditions fail ({', '.join(report.failed_conditions)}); continuing",
                )

        measure_a = SimulationService.sample_invariant(pair_a, cfg)
        measure_b = SimulationService.sample_invariant(pair_b, replace(cfg, seed=cfg.seed + 1))
        report = DistanceService.distance(measure_a, measure_b, alpha)
        verdict = Verdict.INDISTINGUISHABLE if report.indistinguishable else Verdict.DISTINGUISHABLE

        reference_distances = {}
        if reference is not None:
            reference_distances = {
                pair_a.name: DistanceService.distance(measure_a, reference, alpha),
                pair_b.name: DistanceService.distance(measure_b, reference, alpha),
            }
        result = NonidentifiabilityReport(
            pair_names=(pair_a.name, pair_b.name),
            distance=report,
            verdict=verdict,
            reference_distances=reference_distances,
            advisories=advisories,
            measures=(measure_a, measure_b),
        )
        logger.info(
            f"{pair_a.name} vs {pair_b.name}: ks={report.ks:.4g}, threshold={report.threshold:.4g} -> {verdict}",
            extra={'diagnostics': result.diagnostics},
        )
        return result
