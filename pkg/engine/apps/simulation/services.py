"""
Services for the simulation app.
Euler-Maruyama integration, invariant sampling, ergodic averages,
empirical densities and distribution distances.
"""

import logging
import math
import warnings

import numpy as np
import pandas as pd
from scipy import ndimage, stats

from apps.density.models import DensityGrid, DensitySource
from apps.density.services import DensityService
from core.utils.exceptions import (
    DivergenceError,
    InsufficientSupportError,
    MassLossWarning,
    MixingWarning,
    NumericalDomainError,
    StabilityWarning,
)
from core.utils.numerics import numerics_setting

from .models import Average, DistanceReport, EmpiricalMeasure, ReferenceKind, Trajectory, asymptotic_variance
from .rng import NoiseStream

logger = logging.getLogger(__name__)


class SimulationService:
    """Euler-Maruyama chains, invariant sampling, ergodic averages and sample files."""

    # unit offsets around the initial states for the Jacobian scale
    LIPSCHITZ_OFFSET = 1.0

    @staticmethod
    def lipschitz_scale(pair, points, h=1e-5):
        """Largest spectral norm of a finite-difference drift Jacobian at points."""
        points = np.atleast_2d(points)
        d = pair.dimension
        jac = np.empty((points.shape[0], d, d))
        for j in range(d):
            step = np.zeros(d)
            step[j] = h
            jac[:, :, j] = (pair.drift_at(points + step) - pair.drift_at(points - step)) / (2.0 * h)
        if not np.all(np.isfinite(jac)):
            return float('inf')
        return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))

    @classmethod
    def stability_advisory(cls, pair, cfg, x0):
        """dt times the local Lipschitz scale around the initial states."""
        anchors = np.concatenate([x0, x0 + cls.LIPSCHITZ_OFFSET, x0 - cls.LIPSCHITZ_OFFSET])
        advisory = cfg.dt * cls.lipschitz_scale(pair, anchors)
        if advisory > numerics_setting('STABILITY_ADVISORY'):
            logger.warning(f"Step size advisory for {pair.name}: dt*L = {advisory:.3g}")
            warnings.warn(
                f'dt * Lipschitz scale = {advisory:.3g} for {pair.name}; the scheme may be unstable',
                StabilityWarning,
                stacklevel=3,
            )
        return advisory

    @classmethod
    def euler_maruyama(cls, pair, cfg, record_from=0, record_every=1, chains=None):
        """
        X_{n+1} = X_n + b(X_n) dt + sigma(X_n) sqrt(dt) xi_n for every chain at once.

        Args:
            pair: CoefficientPair
            cfg: SimConfig
            record_from: first recorded step (states after that many steps)
            record_every: stride between recorded steps
            chains: chain ids (defaults to range(cfg.n_chains))

        Returns:
            Trajectory with states (n_records, n_chains, d)

        Raises:
            DivergenceError: a chain leaves the blow-up radius or turns non-finite
        """
        chains = list(range(cfg.n_chains)) if chains is None else list(chains)
        d, m = pair.dimension, pair.noise_dimension
        noise = NoiseStream(cfg.seed, chains, m)
        x = cfg.initial_states(d, noise)
        advisory = cls.stability_advisory(pair, cfg, x)

        pair.drift_at(x)  # evaluability at x0
        constant_sigma = pair.sigma_at(x[:1])[0] if pair.has_constant_noise else None
        sqrt_dt = math.sqrt(cfg.dt)
        radius = numerics_setting('BLOWUP_RADIUS')

        record_steps = np.arange(record_from, cfg.n_steps + 1, record_every)
        states = np.empty((record_steps.size, len(chains), d))
        cursor = 0
        if record_steps.size and record_steps[0] == 0:
            states[0] = x
            cursor = 1

        logger.debug(f"Euler-Maruyama {pair.name}: {len(chains)} chains x {cfg.n_steps} steps, dt={cfg.dt}")
        with np.errstate(over='ignore', invalid='ignore'):
            for n in range(cfg.n_steps):
                xi = noise.step(n)
                if constant_sigma is not None:
                    kick = np.einsum('ij,cj->ci', constant_sigma, xi)
                else:
                    kick = np.einsum('cij,cj->ci', pair.sigma_at(x), xi)
                x = x + pair.drift_at(x) * cfg.dt + kick * sqrt_dt

                bad = ~np.isfinite(x).all(axis=1) | (np.abs(x).max(axis=1) > radius)
                if bad.any():
                    chain = chains[int(np.argmax(bad))]
                    logger.error(f"Divergence of {pair.name}: chain {chain} at step {n + 1}")
                    raise DivergenceError(
                        f'Chain {chain} of {pair.name} diverged at step {n + 1}',
                        chain=chain,
                        step=n + 1,
                        pair=pair.name,
                    )
                if cursor < record_steps.size and record_steps[cursor] == n + 1:
                    states[cursor] = x
                    cursor += 1

        return Trajectory(steps=record_steps, states=states, dt=cfg.dt, seed=cfg.seed, stability_advisory=advisory)

    @classmethod
    def sample_invariant(cls, pair, cfg):
        """
        Run cfg.n_chains chains, drop the burn-in, thin and pool in chain order.

        Warns (MixingWarning) when per-axis chain means disagree by more than
        MIXING_STANDARD_ERRORS pooled standard errors.
        """
        per_chain = cfg.recorded_per_chain
        if per_chain < 1:
            raise InsufficientSupportError('No samples left after burn-in and thinning')
        start = cfg.n_steps - (per_chain - 1) * cfg.thinning
        trajectory = cls.euler_maruyama(pair, cfg, record_from=start, record_every=cfg.thinning)
        by_chain = np.transpose(trajectory.states, (1, 0, 2))
        n_chains = by_chain.shape[0]

        measure = EmpiricalMeasure(
            samples=by_chain.reshape(-1, pair.dimension),
            chain_ids=np.repeat(np.arange(n_chains), per_chain),
            steps=np.tile(trajectory.steps, n_chains),
            seed=cfg.seed,
            metadata={
                'pair': pair.name,
                'dt': cfg.dt,
                'n_steps': cfg.n_steps,
                'burn_in_fraction': cfg.burn_in_fraction,
                'thinning': cfg.thinning,
                'stability_advisory': trajectory.stability_advisory,
            },
        )
        if n_chains > 1 and not pair.heavy_tailed:
            cls.check_mixing(measure)
        logger.info(
            f"Sampled {pair.name}: {measure.size} samples from {n_chains} chains, ESS={measure.ess:.0f}",
            extra={'pair': pair.name, 'samples': measure.size},
        )
        return measure

    @staticmethod
    def check_mixing(measure):
        """Spread of chain means against pooled batch-means standard errors."""
        chains = measure.by_chain()
        means = chains.mean(axis=1)
        length = chains.shape[1]
        se = np.sqrt(np.mean([asymptotic_variance(series) for series in chains], axis=0) / length)
        spread = means.max(axis=0) - means.min(axis=0)
        limit = numerics_setting('MIXING_STANDARD_ERRORS')
        failing = np.flatnonzero(spread > limit * se)
        if failing.size:
            logger.warning(f"Chains disagree on axes {failing.tolist()}")
            warnings.warn(
                f'Chain means differ by more than {limit:g} standard errors on axes {failing.tolist()}',
                MixingWarning,
                stacklevel=3,
            )
        return spread / np.where(se > 0, se, np.inf)

    @staticmethod
    def _observe(measure_samples, observable):
        values = np.asarray(observable(measure_samples), dtype=float)
        return values.reshape(measure_samples.shape[0], -1)

    @classmethod
    def time_average(cls, measure, observable, chain=0):
        """Ergodic average of an observable along one chain."""
        series = measure.by_chain()[int(chain)]
        values = cls._observe(series, observable)
        asym = asymptotic_variance(values)
        return Average(
            value=float(values.mean()),
            standard_error=float(np.sqrt(asym[0] / values.shape[0])),
            count=values.shape[0],
        )

    @classmethod
    def ensemble_average(cls, measure, observable):
        """Average over all chains with a batch-means standard error."""
        chains = measure.by_chain()
        values = np.stack([cls._observe(series, observable) for series in chains])
        asym = np.mean([asymptotic_variance(v)[0] for v in values])
        return Average(
            value=float(values.mean()),
            standard_error=float(np.sqrt(asym / values[..., 0].size)),
            count=int(values[..., 0].size),
        )

    # Persistence

    @staticmethod
    def write_samples(measure, path):
        """CSV with columns chain, step, x1..xd (17 significant digits)."""
        frame = pd.DataFrame(measure.samples, columns=[f'x{i + 1}' for i in range(measure.dimension)])
        frame.insert(0, 'step', measure.steps)
        frame.insert(0, 'chain', measure.chain_ids)
        frame.to_csv(path, index=False, float_format='%.17g')
        return path

    @staticmethod
    def read_samples(path, seed=None):
        frame = pd.read_csv(path, float_precision='round_trip')
        coords = [c for c in frame.columns if c.startswith('x')]
        return EmpiricalMeasure(
            samples=frame[coords].to_numpy(),
            chain_ids=frame['chain'].to_numpy(),
            steps=frame['step'].to_numpy(),
            seed=seed,
        )


class DensityEstimationService:
    """Histogram and Gaussian KDE densities from an empirical measure."""

    @staticmethod
    def _bin_counts(measure, box, nodes):
        lower, upper, shape, _ = DensityService.grid_nodes(box, nodes)
        if lower.shape[0] != measure.dimension:
            raise NumericalDomainError(
                f'Grid dimension {lower.shape[0]} differs from sample dimension {measure.dimension}'
            )
        if measure.size < numerics_setting('MIN_DENSITY_SAMPLES'):
            raise InsufficientSupportError(
                f'{measure.size} samples are too few for a density estimate '
                f'(need {numerics_setting("MIN_DENSITY_SAMPLES")})'
            )
        steps = (upper - lower) / (np.array(shape) - 1)
        edges = [np.linspace(lo - h / 2, hi + h / 2, n + 1) for lo, hi, h, n in zip(lower, upper, steps, shape)]
        counts, _ = np.histogramdd(measure.samples, bins=edges)
        inside = float(counts.sum())
        loss = 1.0 - inside / measure.size
        if inside == 0:
            raise InsufficientSupportError('No samples fall on the estimation grid (mass loss 100%)', mass_loss=1.0)
        if loss > 0:
            logger.warning(f"Mass loss: {loss:.2%} of samples outside the grid")
            warnings.warn(f'{loss:.2%} of samples fall outside the grid', MassLossWarning, stacklevel=3)
        return lower, upper, steps, counts, loss

    @classmethod
    def histogram_density(cls, measure, box, nodes):
        """Bin counts over bins centered at the grid nodes, divided by count * bin volume."""
        lower, upper, steps, counts, loss = cls._bin_counts(measure, box, nodes)
        values = counts / (measure.size * float(np.prod(steps)))
        return DensityGrid(
            lower=lower, upper=upper, values=values, source=DensitySource.HISTOGRAM,
            metadata={'mass_loss': loss, 'samples': measure.size},
        )

    @staticmethod
    def silverman_bandwidth(samples):
        """0.9 min(std, IQR/1.34) n^(-1/(d+4)) per axis."""
        samples = np.atleast_2d(samples.T).T
        n, d = samples.shape
        std = samples.std(axis=0, ddof=1)
        iqr = stats.iqr(samples, axis=0) / 1.34
        spread = np.where(iqr > 0, np.minimum(std, iqr), std)
        return 0.9 * spread * n ** (-1.0 / (d + 4))

    @classmethod
    def kde_density(cls, measure, box, nodes, bandwidth_scale=1.0):
        """
        Gaussian KDE with per-axis Silverman bandwidth, evaluated by binning on
        the grid and smoothing with a Gaussian filter, then rescaled so the
        box mass equals the fraction of samples inside the grid.
        """
        lower, upper, steps, counts, loss = cls._bin_counts(measure, box, nodes)
        bandwidth = bandwidth_scale * cls.silverman_bandwidth(measure.samples)
        smoothed = ndimage.gaussian_filter(counts, sigma=bandwidth / steps, mode='constant', truncate=5.0)
        raw = DensityGrid(lower=lower, upper=upper, values=np.maximum(smoothed, 0.0))
        values = raw.values * ((1.0 - loss) / raw.mass) if raw.mass > 0 else raw.values
        return DensityGrid(
            lower=lower, upper=upper, values=values, source=DensitySource.KDE,
            metadata={'mass_loss': loss, 'samples': measure.size, 'bandwidth': bandwidth.tolist()},
        )


class DistanceService:
    """Kolmogorov-Smirnov and Wasserstein-1 distances against a reference law."""

    @staticmethod
    def ks_threshold(n1, n2=None, alpha=0.05):
        """
        Asymptotic KS critical value c(alpha) sqrt((n1 + n2) / (n1 n2));
        one-sample when n2 is None.
        """
        c = math.sqrt(-math.log(alpha / 2.0) / 2.0)
        if n2 is None or not np.isfinite(n2):
            return c / math.sqrt(n1)
        return c * math.sqrt((n1 + n2) / (n1 * n2))

    @staticmethod
    def _projections(dimension):
        rng = np.random.default_rng(numerics_setting('KS_PROJECTION_SEED'))
        directions = rng.standard_normal((numerics_setting('KS_PROJECTIONS'), dimension))
        return directions / np.linalg.norm(directions, axis=1, keepdims=True)

    @staticmethod
    def _grid_cdf_callable(grid, axis):
        nodes, cdf = DensityService.grid_cdf(grid, axis)
        return lambda x: np.interp(x, nodes, cdf, left=cdf[0], right=cdf[-1])

    @classmethod
    def distance(cls, measure, reference, alpha=0.05):
        """
        KS (and in 1D Wasserstein-1) distance between an empirical measure and
        another measure, a density grid or a CDF (callable or frozen scipy law).
        Thresholds use effective sample sizes; the level is split evenly over
        the per-axis and projected statistics.
        """
        d = measure.dimension
        per_axis, projected = [], []
        w1, n2, ess2 = None, None, None

        if isinstance(reference, EmpiricalMeasure):
            if reference.dimension != d:
                raise NumericalDomainError('Measures of different dimensions')
            kind = ReferenceKind.SAMPLES
            n2, ess2 = reference.size, reference.ess
            for axis in range(d):
                per_axis.append(stats.ks_2samp(measure.samples[:, axis], reference.samples[:, axis]).statistic)
            if d == 1:
                w1 = float(stats.wasserstein_distance(measure.samples[:, 0], reference.samples[:, 0]))
            else:
                for direction in cls._projections(d):
                    statistic = stats.ks_2samp(measure.samples @ direction, reference.samples @ direction).statistic
                    projected.append(statistic)
        elif isinstance(reference, DensityGrid):
            if reference.dimension != d:
                raise NumericalDomainError('Grid and samples of different dimensions')
            kind = ReferenceKind.GRID
            for axis in range(d):
                cdf = cls._grid_cdf_callable(reference, axis)
                per_axis.append(stats.kstest(measure.samples[:, axis], cdf).statistic)
            if d == 1:
                nodes, weights = DensityService.marginal_density(reference, 0)
                w1 = float(stats.wasserstein_distance(measure.samples[:, 0], nodes, v_weights=weights))
        else:
            if d != 1:
                raise NumericalDomainError('CDF references are one-dimensional')
            kind = ReferenceKind.CDF
            cdf = reference.cdf if hasattr(reference, 'cdf') else reference
            per_axis.append(stats.kstest(measure.samples[:, 0], cdf).statistic)

        ks = float(max(per_axis + projected))
        report = DistanceReport(
            ks=ks,
            wasserstein1=w1,
            n1=measure.size,
            n2=n2,
            ess1=measure.ess,
            ess2=ess2,
            threshold=cls.ks_threshold(measure.ess, ess2, alpha / len(per_axis + projected)),
            reference=kind,
            ks_per_axis=tuple(float(v) for v in per_axis),
            ks_projections=tuple(float(v) for v in projected),
        )
        logger.debug(f"Distance ({kind}): ks={ks:.4g}, threshold={report.threshold:.4g}")
        return report
