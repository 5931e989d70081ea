"""
Services for the spde app.
Galerkin simulation of the reaction-diffusion equation, Gibbs log-ratios
against the Gaussian reference, mode statistics and inversion of the
noise intensity and the reaction term.
"""

import logging
import math
import warnings

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import logsumexp
from scipy.stats import qmc

from apps.coefficients.models import ConditionTag, Violation
from apps.inversion.models import Aggregation, InversionReport, InversionTarget
from apps.simulation.models import EmpiricalMeasure, InitialState, Trajectory
from apps.simulation.rng import NoiseStream
from apps.simulation.services import SimulationService
from core.utils.exceptions import (
    DivergenceError,
    InsufficientSupportError,
    IntegrabilityWarning,
    NumericalDomainError,
    StabilityWarning,
)
from core.utils.numerics import numerics_setting

from .models import (
    LogRatioSection,
    ModeStatistics,
    PartitionEstimate,
    ReactionConditionReport,
    SpatialQuadrature,
    SpectralState,
    TimeScheme,
    eigenvalues,
    section_states,
)

logger = logging.getLogger(__name__)


class SPDEService:
    """Galerkin simulation of the reaction-diffusion equation and mode sample files."""

    # Simulation

    @staticmethod
    def reaction_projection(coeffs, reaction, quadrature):
        """<e_k, U'(x(.))> for coefficient arrays (..., N)."""
        return quadrature.project(reaction.derivative(quadrature.field(coeffs)))

    @staticmethod
    def stability_advisory(cfg, quadrature, x0):
        """dt times the largest |U''| over the initial fields widened by one unit."""
        values = quadrature.field(x0)
        anchors = np.concatenate([values.ravel(), values.ravel() + 1.0, values.ravel() - 1.0])
        curvature = np.abs(cfg.reaction.curvature(anchors))
        advisory = cfg.dt * float(np.max(curvature)) if curvature.size else 0.0
        if advisory > numerics_setting('STABILITY_ADVISORY'):
            logger.warning(f"Step size advisory for reaction {cfg.reaction.name}: dt*|U''| = {advisory:.3g}")
            warnings.warn(
                f"dt * |U''| = {advisory:.3g} for {cfg.reaction.name}; the explicit reaction step may be unstable",
                StabilityWarning,
                stacklevel=3,
            )
        return advisory

    @staticmethod
    def _scheme_factors(cfg):
        """(a, f, s) with x_{n+1} = a x_n + f P(U'(x_n)) + s xi_n per mode."""
        lam = cfg.eigenvalues
        if cfg.scheme == TimeScheme.EXPONENTIAL:
            decay = np.exp(-lam * cfg.dt)
            noise = np.sqrt(-cfg.beta * np.expm1(-2.0 * lam * cfg.dt) / (2.0 * lam))
            return decay, -np.expm1(-lam * cfg.dt) / lam, noise
        implicit = 1.0 / (1.0 + cfg.dt * lam)
        return implicit, cfg.dt * implicit, math.sqrt(cfg.beta * cfg.dt) * implicit

    @classmethod
    def simulate_spde(cls, cfg, record_from=0, record_every=1, chains=None):
        """
        Integrate the Galerkin system for every chain at once. The linear part
        is treated implicitly (semi_implicit) or exactly (exponential); the
        reaction term is projected on the modes by the spatial quadrature and
        each mode receives its own Gaussian increment.

        Returns:
            Trajectory with states (n_records, n_chains, N)

        Raises:
            DivergenceError: a mode leaves the blow-up radius or turns non-finite
        """
        chains = list(range(cfg.n_chains)) if chains is None else list(chains)
        n = cfg.n_modes
        quadrature = cfg.quadrature()
        noise = NoiseStream(cfg.seed, chains, n)
        x = cfg.simulation.initial_states(n, noise)
        if cfg.x0 == InitialState.NORMAL:
            x = x * np.sqrt(cfg.beta / (2.0 * cfg.eigenvalues))
        advisory = cls.stability_advisory(cfg, quadrature, x)
        decay, forcing, kick = cls._scheme_factors(cfg)
        reactive = cfg.reaction.linear_rate != 0.0
        radius = numerics_setting('BLOWUP_RADIUS')

        record_steps = np.arange(record_from, cfg.n_steps + 1, record_every)
        states = np.empty((record_steps.size, len(chains), n))
        cursor = 0
        if record_steps.size and record_steps[0] == 0:
            states[0] = x
            cursor = 1

        logger.debug(
            f"Galerkin {cfg.reaction.name}: {len(chains)} chains x {cfg.n_steps} steps, "
            f"N={n}, scheme={cfg.scheme}, dt*lambda_N={cfg.stiffness:.3g}"
        )
        with np.errstate(over='ignore', invalid='ignore'):
            for step in range(cfg.n_steps):
                update = decay * x + kick * noise.step(step)
                if reactive:
                    update += forcing * cls.reaction_projection(x, cfg.reaction, quadrature)
                x = update

                bad = ~np.isfinite(x) | (np.abs(x) > radius)
                if bad.any():
                    row, mode = np.unravel_index(int(np.argmax(bad)), bad.shape)
                    chain = chains[row]
                    logger.error(
                        f"Divergence of {cfg.reaction.name}: chain {chain}, mode {mode + 1} at step {step + 1}"
                    )
                    raise DivergenceError(
                        f'Mode {mode + 1} of chain {chain} diverged at step {step + 1}',
                        chain=chain,
                        step=step + 1,
                        mode=int(mode) + 1,
                    )
                if cursor < record_steps.size and record_steps[cursor] == step + 1:
                    states[cursor] = x
                    cursor += 1

        return Trajectory(steps=record_steps, states=states, dt=cfg.dt, seed=cfg.seed, stability_advisory=advisory)

    @classmethod
    def sample_spde(cls, cfg):
        """Equilibrium mode samples: burn-in dropped, thinned, pooled in chain order."""
        sim = cfg.simulation
        per_chain = sim.recorded_per_chain
        if per_chain < 1:
            raise InsufficientSupportError('No samples left after burn-in and thinning')
        start = cfg.n_steps - (per_chain - 1) * cfg.thinning
        trajectory = cls.simulate_spde(cfg, record_from=start, record_every=cfg.thinning)
        by_chain = np.transpose(trajectory.states, (1, 0, 2))
        n_chains = by_chain.shape[0]

        measure = EmpiricalMeasure(
            samples=by_chain.reshape(-1, cfg.n_modes),
            chain_ids=np.repeat(np.arange(n_chains), per_chain),
            steps=np.tile(trajectory.steps, n_chains),
            seed=cfg.seed,
            metadata={
                'reaction': cfg.reaction.name,
                'n_modes': cfg.n_modes,
                'beta': cfg.beta,
                'scheme': cfg.scheme,
                'dt': cfg.dt,
                'n_steps': cfg.n_steps,
                'thinning': cfg.thinning,
                'stiffness': cfg.stiffness,
                'stability_advisory': trajectory.stability_advisory,
            },
        )
        if n_chains > 1:
            SimulationService.check_mixing(measure)
        logger.info(
            f"Sampled {cfg.reaction.name} on {cfg.n_modes} modes: {measure.size} samples, ESS={measure.ess:.0f}",
            extra={'reaction': cfg.reaction.name, 'samples': measure.size},
        )
        return measure

    # Persistence

    @staticmethod
    def write_mode_samples(measure, path):
        """Long CSV with columns chain, step, mode, value (17 significant digits)."""
        n = measure.dimension
        frame = pd.DataFrame({
            'chain': np.repeat(measure.chain_ids, n),
            'step': np.repeat(measure.steps, n),
            'mode': np.tile(np.arange(1, n + 1), measure.size),
            'value': np.asarray(measure.samples).ravel(),
        })
        frame.to_csv(path, index=False, float_format='%.17g')
        return path

    @staticmethod
    def read_mode_samples(path, seed=None):
        frame = pd.read_csv(path, float_precision='round_trip')
        wide = frame.pivot(index=['chain', 'step'], columns='mode', values='value').sort_index()
        return EmpiricalMeasure(
            samples=wide.to_numpy(),
            chain_ids=wide.index.get_level_values('chain').to_numpy(),
            steps=wide.index.get_level_values('step').to_numpy(),
            seed=seed,
        )

    @staticmethod
    def write_field_snapshots(measure, path, quadrature=None, count=8):
        """
        Fields x(xi) of the last `count` samples of every chain on the
        quadrature nodes; columns chain, step, xi, value.
        """
        quadrature = quadrature or SpatialQuadrature(measure.dimension)
        chains = measure.by_chain()[:, -int(count):, :]
        steps = np.asarray(measure.steps).reshape(chains.shape[0], -1)[:, -int(count):]
        fields = quadrature.field(chains)
        n_chain, n_snap, n_xi = fields.shape
        frame = pd.DataFrame({
            'chain': np.repeat(measure.chains, n_snap * n_xi),
            'step': np.repeat(steps.ravel(), n_xi),
            'xi': np.tile(quadrature.xi, n_chain * n_snap),
            'value': fields.ravel(),
        })
        frame.to_csv(path, index=False, float_format='%.17g')
        return path


class SPDEStatisticsService:
    """Gibbs log-ratios against the Gaussian reference, partition functions and mode statistics."""

    # Importance weights below this effective fraction make Z_U unreliable
    PARTITION_MIN_ESS_FRACTION = 0.01
    PARTITION_CHECKPOINTS = 16
    # Two-sided 3 standard-error level, split over the mode pairs
    CORRELATION_LEVEL = 2.0 * stats.norm.sf(3.0)

    # Gibbs weights

    @staticmethod
    def _coefficients(state):
        return state.coeffs if isinstance(state, SpectralState) else np.asarray(state, dtype=float)

    @classmethod
    def gibbs_log_ratio(cls, state, reaction, beta, quadrature=None):
        """
        (2/beta) * integral of U(x(xi)) over (0, 1): the log-density of the
        Gibbs measure against the Gaussian reference, without log Z_U.
        Accepts a SpectralState or coefficient arrays (..., N); for
        U = -u^2/2 and x = a e_1 the value is -a^2 / beta.
        """
        coeffs = cls._coefficients(state)
        quadrature = quadrature or SpatialQuadrature(coeffs.shape[-1])
        values = (2.0 / beta) * quadrature.integrate(reaction.potential(quadrature.field(coeffs)))
        return float(values) if np.ndim(values) == 0 else values

    @staticmethod
    def reference_draws(n_modes, beta, n_samples, seed=0):
        """Truncated draws of the Gaussian reference: mode k ~ N(0, beta / (2 lambda_k))."""
        rng = np.random.default_rng(seed)
        scale = np.sqrt(beta / (2.0 * eigenvalues(n_modes)))
        return rng.standard_normal((int(n_samples), int(n_modes))) * scale

    @classmethod
    def partition_function(cls, reaction, beta, n_modes=16, n_samples=100_000, seed=0):
        """
        Monte Carlo estimate of Z_U = E_mu0[exp((2/beta) int U)] with running
        log-means at evenly spaced checkpoints. A small importance-weight
        effective fraction marks the estimate divergent (IntegrabilityWarning).
        """
        if n_samples < cls.PARTITION_CHECKPOINTS:
            raise NumericalDomainError(f'n_samples must be at least {cls.PARTITION_CHECKPOINTS}')
        draws = cls.reference_draws(n_modes, beta, n_samples, seed)
        log_w = cls.gibbs_log_ratio(draws, reaction, beta, SpatialQuadrature(n_modes))
        log_z = float(logsumexp(log_w) - math.log(n_samples))

        count = cls.PARTITION_CHECKPOINTS
        checkpoints = np.linspace(n_samples / count, n_samples, count).astype(int)
        running = np.logaddexp.accumulate(log_w)
        partial = running[checkpoints - 1] - np.log(checkpoints)
        ess_fraction = float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)) / n_samples)
        divergent = not np.isfinite(log_z) or ess_fraction < cls.PARTITION_MIN_ESS_FRACTION
        if divergent:
            logger.warning(f"Partition function of {reaction.name} does not stabilize (weight ESS {ess_fraction:.2%})")
            warnings.warn(
                f'Importance weights of {reaction.name} have effective fraction {ess_fraction:.2%}; '
                'Z_U may be infinite',
                IntegrabilityWarning,
                stacklevel=2,
            )
        return PartitionEstimate(
            log_z=log_z,
            partial_log_means=partial,
            checkpoints=checkpoints,
            weight_ess_fraction=ess_fraction,
            n_samples=int(n_samples),
            seed=seed,
            divergent=divergent,
        )

    # Statistics

    @staticmethod
    def series_trace(beta, alpha=0.0):
        """
        (beta/2) * sum over k >= 1 of 1 / ((k pi)^2 + alpha); 1/6 * beta/2 at
        alpha = 0. Needs alpha > -pi^2.
        """
        if alpha <= -np.pi ** 2:
            raise NumericalDomainError(f'alpha must exceed -pi^2, got {alpha}')
        if abs(alpha) < 1e-8:
            total = 1.0 / 6.0 - alpha / 90.0
        elif alpha > 0:
            root = math.sqrt(alpha)
            total = (root / math.tanh(root) - 1.0) / (2.0 * alpha)
        else:
            root = math.sqrt(-alpha)
            total = (1.0 - root / math.tan(root)) / (2.0 * root ** 2)
        return 0.5 * beta * total

    @classmethod
    def mode_statistics(cls, measure, beta, alpha=0.0):
        """
        Empirical mode variances and correlations against the values of a
        linear reaction with rate alpha (alpha = 0 is the free field).
        """
        lam = eigenvalues(measure.dimension)
        if lam[0] + alpha <= 0:
            raise NumericalDomainError(f'lambda_1 + alpha must be positive, got {lam[0] + alpha:.4g}')
        samples = measure.samples
        variances = samples.var(axis=0, ddof=1)
        expected = beta / (2.0 * (lam + alpha))

        n = measure.dimension
        if n > 1:
            corr = np.corrcoef(samples, rowvar=False)
            cross = float(np.max(np.abs(corr[~np.eye(n, dtype=bool)])))
            pairs = n * (n - 1) // 2
            z = max(3.0, float(stats.norm.isf(cls.CORRELATION_LEVEL / (2.0 * pairs))))
        else:
            cross, z = 0.0, 3.0
        result = ModeStatistics(
            beta=float(beta),
            alpha=float(alpha),
            variances=variances,
            expected=expected,
            trace=float(variances.sum()),
            truncated_trace=float(expected.sum()),
            series_trace=cls.series_trace(beta, alpha),
            max_cross_correlation=cross,
            correlation_bound=z / math.sqrt(measure.ess),
            ess=measure.ess,
        )
        logger.info(
            f"Mode statistics: max relative variance error {result.max_relative_error():.3%}, "
            f"trace {result.trace:.5f} vs {result.series_trace:.5f}"
        )
        return result

    @staticmethod
    def check_reaction_conditions(reaction, box=(-5.0, 5.0), n_samples=4096, seed=0):
        """
        Estimate the reaction constants K1..K5 and q on an interval.
        Estimates are sampled, not proven bounds.
        """
        if n_samples < 2:
            raise NumericalDomainError('n_samples must be at least 2', n_samples=n_samples)
        lower, upper = float(box[0]), float(box[1])
        if not lower < upper:
            raise NumericalDomainError(f'Invalid interval [{lower}, {upper}]')
        slack = numerics_setting('STRICT_SLACK')
        lam1 = float(np.pi ** 2)

        unit = qmc.Sobol(d=2, scramble=True, seed=seed).random(n_samples)
        u = lower + (upper - lower) * unit[:, 0]
        v = lower + (upper - lower) * unit[:, 1]
        du, dv = reaction.derivative(u), reaction.derivative(v)
        violations = []
        finite = np.isfinite(du) & np.isfinite(dv)
        if not finite.all():
            bad = int(np.argmin(finite))
            violations.append(Violation(ConditionTag.FINITE, (float(u[bad]),), float('nan')))
            u, v, du, dv = u[finite], v[finite], du[finite], dv[finite]
        if u.size < 2:
            raise NumericalDomainError(f'Reaction {reaction.name} is not finite on the interval')

        gap = (u - v) ** 2
        separated = gap > 0
        k1 = float(np.max((du - dv)[separated] * (u - v)[separated] / gap[separated])) - lam1

        r = np.abs(u)
        outer = (r >= 0.5 * r.max()) & (r > 0)
        ratio = du[outer] * u[outer] / u[outer] ** 2
        margin = float(-np.max(ratio))
        k3 = lam1 + margin
        k2 = float(np.max(du * u + margin * u ** 2))
        if margin <= slack:
            worst = np.flatnonzero(outer)[int(np.argmax(ratio))]
            violations.append(Violation(ConditionTag.COERCIVE, (float(u[worst]),), margin))

        size = np.abs(du)
        fit = outer & (size > 0)
        exponent = 1.0
        if fit.sum() >= 2 and np.ptp(np.log(r[fit])) > 0:
            exponent = max(1.0, float(np.polyfit(np.log(r[fit]), np.log(size[fit]), 1)[0]))
        k5 = float(np.max(size[outer] / r[outer] ** exponent)) if outer.any() else 0.0
        k4 = float(max(0.0, np.max(size - k5 * r ** exponent)))

        report = ReactionConditionReport(
            reaction_name=reaction.name,
            box=(lower, upper),
            n_samples=n_samples,
            seed=seed,
            first_eigenvalue=lam1,
            monotone_constant=k1,
            coercive_constants=(k2, k3),
            growth_constants=(k4, k5),
            growth_exponent=exponent,
            violations=tuple(violations),
        )
        logger.info(f"Reaction conditions for {reaction.name}: {report.verdict} (K1={k1:.4g}, K3={k3:.4g})")
        return report


class SPDEInversionService:
    """Noise-intensity and reaction recovery from mode samples and Gibbs sections."""

    FORMULAS = {
        InversionTarget.DRIFT_SPDE: '<e_k, U\'(x)> = (beta/2) D_k ln p',
        InversionTarget.BETA_SPDE: 'beta = 2 <e_k, b(x)> / D_k ln p',
        InversionTarget.BETA_RATIO: 'beta1/beta2 = D_k ln p2 / D_k ln p1',
    }
    # Quantile bands of each mode marginal where the score is evaluated
    SCORE_QUANTILES = np.concatenate([np.linspace(0.1, 0.35, 6), np.linspace(0.65, 0.9, 6)])
    SECTION_MARGIN = 2
    # Kernel width per mode as a fraction of the marginal standard deviation
    SCORE_BANDWIDTH_FRACTION = 0.5

    # Inversion

    @staticmethod
    def mode_drift(samples, reaction, quadrature):
        """<e_k, b(x)> = -lambda_k x_k + <e_k, U'(x)> for mode samples (n, N)."""
        lam = eigenvalues(samples.shape[1])
        return -lam * samples + SPDEService.reaction_projection(samples, reaction, quadrature)

    @classmethod
    def _mode_beta(cls, x, drift, bandwidth):
        """
        2 E[b_k K_h(a - x_k)] / (d/da) E[K_h(a - x_k)] at quantile points a;
        the kernel-smoothed marginal balance holds for any bandwidth.
        """
        points = np.quantile(x, cls.SCORE_QUANTILES)
        z = (points[:, None] - x[None, :]) / bandwidth
        kernel = np.exp(-0.5 * z ** 2)
        flux = (kernel * drift[None, :]).mean(axis=1)
        slope = (-z / bandwidth * kernel).mean(axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            return 2.0 * flux / slope

    @classmethod
    def invert_beta_spde(cls, measure, reaction, modes=4, bandwidth_scale=1.0, quadrature_nodes=None):
        """
        Noise intensity from equilibrium mode samples and the known reaction.

        Args:
            measure: EmpiricalMeasure over the N mode coordinates
            reaction: Reaction of the simulated equation
            modes: number K of leading modes used
            bandwidth_scale: factor on the kernel width (half a standard
                deviation of each mode marginal)

        Returns:
            InversionReport with the median over evaluation points and modes;
            per_axis holds the per-mode medians.

        Raises:
            InsufficientSupportError: effective sample size of the used modes
                below SPDE_MIN_ESS
        """
        n_modes = measure.dimension
        used = min(int(modes), n_modes)
        if used < 1:
            raise NumericalDomainError('At least one mode is needed')
        ess = float(np.min(measure.ess_per_axis[:used]))
        minimum = numerics_setting('SPDE_MIN_ESS')
        if ess < minimum:
            raise InsufficientSupportError(
                f'Effective sample size {ess:.0f} of the first {used} modes is below {minimum:g}', ess=ess,
            )
        quadrature = SpatialQuadrature(n_modes, quadrature_nodes)
        samples = np.asarray(measure.samples)
        drift = cls.mode_drift(samples, reaction, quadrature)
        bandwidth = bandwidth_scale * cls.SCORE_BANDWIDTH_FRACTION * samples[:, :used].std(axis=0, ddof=1)

        per_mode = [cls._mode_beta(samples[:, k], drift[:, k], bandwidth[k]) for k in range(used)]
        estimates = np.concatenate(per_mode)
        estimates = estimates[np.isfinite(estimates)]
        if not estimates.size:
            raise InsufficientSupportError('No finite noise-intensity estimates')
        per_axis = tuple(float(np.nanmedian(values)) for values in per_mode)
        recovered = float(np.median(estimates))
        logger.info(f"SPDE beta from {used} modes: {recovered:.4g} (per mode {[f'{v:.4g}' for v in per_axis]})")
        return InversionReport(
            target=InversionTarget.BETA_SPDE,
            recovered=recovered,
            pointwise_estimates=np.sort(estimates),
            dispersion=float(stats.iqr(estimates)),
            masked_fraction=0.0,
            formula=cls.FORMULAS[InversionTarget.BETA_SPDE],
            aggregation=Aggregation.MEDIAN,
            admissible_nodes=int(estimates.size),
            thresholds={'min_ess': minimum, 'ess': ess, 'bandwidth': bandwidth.tolist()},
            per_axis=per_axis,
            statistical=True,
        )

    @classmethod
    def beta_ratio_spde(cls, measure_1, measure_2, reaction_1, reaction_2=None, modes=4):
        """
        beta1 / beta2 from two equilibria: the ratio of the per-mode
        noise-intensity estimates, median over modes.
        """
        first = cls.invert_beta_spde(measure_1, reaction_1, modes)
        second = cls.invert_beta_spde(measure_2, reaction_2 or reaction_1, modes)
        ratios = np.asarray(first.per_axis) / np.asarray(second.per_axis)
        return InversionReport(
            target=InversionTarget.BETA_RATIO,
            recovered=float(np.median(ratios)),
            pointwise_estimates=np.sort(ratios),
            dispersion=float(stats.iqr(ratios)),
            masked_fraction=0.0,
            formula=cls.FORMULAS[InversionTarget.BETA_RATIO],
            aggregation=Aggregation.MEDIAN,
            admissible_nodes=int(ratios.size),
            per_axis=tuple(float(r) for r in ratios),
            statistical=True,
        )

    @classmethod
    def log_ratio_section(cls, reaction, beta, modes=(1,), half_width=1.0, nodes=41, n_modes=16, quadrature_nodes=None):
        """gibbs_log_ratio on a uniform grid over at most three active modes."""
        modes = tuple(int(k) for k in modes)
        if not 1 <= len(modes) <= 3:
            raise NumericalDomainError(f'A section spans one to three modes, got {len(modes)}')
        if min(modes) < 1 or max(modes) > n_modes:
            raise NumericalDomainError(f'Section modes must lie in 1..{n_modes}')
        if nodes < 2 * cls.SECTION_MARGIN + 3:
            raise NumericalDomainError(f'A section needs at least {2 * cls.SECTION_MARGIN + 3} nodes per axis')
        axes = tuple(np.linspace(-half_width, half_width, int(nodes)) for _ in modes)
        quadrature = SpatialQuadrature(n_modes, quadrature_nodes)
        states = section_states(modes, axes, int(n_modes))
        values = SPDEStatisticsService.gibbs_log_ratio(states, reaction, beta, quadrature)
        return LogRatioSection(
            modes=modes, axes=axes, values=np.asarray(values),
            beta=float(beta), n_modes=int(n_modes), reaction_name=reaction.name,
        )

    @staticmethod
    def _central_difference(values, step, axis):
        """Five-point first derivative; the two outermost layers are left as NaN."""
        values = np.moveaxis(values, axis, 0)
        out = np.full_like(values, np.nan)
        out[2:-2] = (values[:-4] - 8.0 * values[1:-3] + 8.0 * values[3:-1] - values[4:]) / (12.0 * step)
        return np.moveaxis(out, 0, axis)

    @classmethod
    def _section_derivatives(cls, section):
        return np.stack([
            cls._central_difference(section.values, h, axis) for axis, h in enumerate(section.steps)
        ])

    @classmethod
    def invert_drift_spde(cls, section, beta=None, reaction=None, quadrature_nodes=None):
        """
        Reaction drift <e_k, U'(x)> = (beta/2) D_k[gibbs log-ratio] on a section.

        With `reaction` given, the direct quadrature projection of U' on the
        section nodes is compared and the max abs gap stored under
        thresholds['reference_error'].
        """
        beta = section.beta if beta is None else float(beta)
        if beta <= 0:
            raise NumericalDomainError(f'beta must be positive, got {beta}')
        field = 0.5 * beta * cls._section_derivatives(section)
        node_mask = ~np.isfinite(field).all(axis=0)
        recovered = np.ma.masked_array(
            np.nan_to_num(field), mask=np.broadcast_to(node_mask, field.shape).copy(),
        )
        thresholds = {'beta': beta, 'stencil_margin': cls.SECTION_MARGIN}
        if reaction is not None:
            reference = cls.reaction_section_projection(section, reaction, quadrature_nodes)
            thresholds['reference_error'] = float(np.ma.abs(recovered - reference).max())
            gap = thresholds['reference_error']
            logger.info(f"Reaction drift on section {section.modes}: gap to projection {gap:.3g}")
        estimates = recovered.compressed()
        return InversionReport(
            target=InversionTarget.DRIFT_SPDE,
            recovered=recovered,
            pointwise_estimates=estimates,
            dispersion=float(stats.iqr(estimates)) if estimates.size else 0.0,
            masked_fraction=float(node_mask.mean()),
            formula=cls.FORMULAS[InversionTarget.DRIFT_SPDE],
            admissible_nodes=int((~node_mask).sum()),
            thresholds=thresholds,
            grid=section,
        )

    @staticmethod
    def reaction_section_projection(section, reaction, quadrature_nodes=None):
        """<e_k, U'(x)> for the active modes at every section node, shape (K, *shape)."""
        quadrature = SpatialQuadrature(section.n_modes, quadrature_nodes)
        projected = SPDEService.reaction_projection(section.states(), reaction, quadrature)
        return np.stack([projected[..., k - 1] for k in section.modes])

    @classmethod
    def reaction_drift_difference(cls, section_1, section_2, beta):
        """
        |<e_k, U1' - U2'>| = (beta/2) |D ln p1 - D ln p2| on two sections over
        the same nodes; Euclidean norm over the active modes.
        """
        if section_1.shape != section_2.shape or section_1.modes != section_2.modes:
            raise NumericalDomainError('Sections must share modes and nodes')
        diff = 0.5 * beta * (cls._section_derivatives(section_1) - cls._section_derivatives(section_2))
        diff = np.ma.masked_invalid(diff)
        return np.ma.sqrt(np.ma.sum(diff ** 2, axis=0))
