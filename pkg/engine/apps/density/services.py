"""
Services for the density app.
Closed-form and Gibbs invariant densities, normalization with tail
extrapolation, finite-difference operators and the stationary
Fokker-Planck residual.
"""

import json
import logging
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.stats import qmc

from core.utils.boxes import as_box, widen_box
from core.utils.exceptions import (
    CoefficientDomainError,
    HeavyTailWarning,
    IntegrabilityWarning,
    NumericalDomainError,
    TruncationError,
)
from core.utils.numerics import numerics_setting

from . import quadrature
from .models import DensityGrid, DensitySource, NormalizationResult, ResidualReport, TailFit, TailModel, check_shape
from .serializers import DensityGridHeaderSerializer

logger = logging.getLogger(__name__)


class DensityService:
    """Invariant densities on uniform grids: construction, normalization, marginals and persistence."""

    TAIL_WINDOW_FRACTION = 0.1
    MIN_TAIL_WINDOW = 3

    @staticmethod
    def grid_nodes(box, nodes):
        """Axis nodes and mesh points of a uniform grid over a box."""
        lower, upper = as_box(*box)
        shape = check_shape(nodes, lower.shape[0])
        axes = quadrature.axis_nodes(lower, upper, shape)
        mesh = np.meshgrid(*axes, indexing='ij')
        return lower, upper, shape, np.stack([m.ravel() for m in mesh], axis=1)

    # Normalization

    @classmethod
    def _fit_tail(cls, profile, coordinate, axis, side):
        """
        Fit exponential and power-law decay to the outermost tenth of a
        boundary profile and integrate the better fit beyond the boundary.
        `coordinate` increases outward.
        """
        k = max(cls.MIN_TAIL_WINDOW, int(np.ceil(cls.TAIL_WINDOW_FRACTION * profile.size)))
        window = profile[-k:]
        s = coordinate[-k:]
        boundary_value = float(window[-1])

        if boundary_value <= 0.0:
            return TailFit(axis, side, TailModel.NONE, 0.0, 0.0, boundary_value)
        if boundary_value >= window[0]:
            return TailFit(axis, side, TailModel.DIVERGENT, 0.0, float('inf'), boundary_value)

        positive = window > 0
        s, log_y = s[positive], np.log(window[positive])
        candidates = []

        slope, intercept = np.polyfit(s, log_y, 1)
        rss = float(np.sum((intercept + slope * s - log_y) ** 2))
        if slope < 0:
            candidates.append((rss, TailModel.EXPONENTIAL, float(slope), boundary_value / -slope))

        if np.all(s > 0):
            log_s = np.log(s)
            slope_p, intercept_p = np.polyfit(log_s, log_y, 1)
            rss_p = float(np.sum((intercept_p + slope_p * log_s - log_y) ** 2))
            mass = boundary_value * s[-1] / (-slope_p - 1.0) if slope_p < -1.0 else float('inf')
            candidates.append((rss_p, TailModel.POWER, float(slope_p), mass))

        if not candidates:
            return TailFit(axis, side, TailModel.DIVERGENT, 0.0, float('inf'), boundary_value)
        _, model, rate, mass = min(candidates, key=lambda c: c[0])
        if not np.isfinite(mass):
            model = TailModel.DIVERGENT
        return TailFit(axis, side, model, rate, float(mass), boundary_value)

    @classmethod
    def normalization_constant(cls, grid):
        """
        Quadrature of the values over the box plus the extrapolated tail mass.

        Args:
            grid: DensityGrid (normalized or not)

        Returns:
            NormalizationResult. Profiles that do not decay toward a boundary
            give an infinite tail and an IntegrabilityWarning.
        """
        steps = grid.spacing
        constant = quadrature.integrate(grid.values, steps)
        fits = []
        for axis, nodes in enumerate(grid.nodes):
            profile = quadrature.marginal(grid.values, steps, axis)
            fits.append(cls._fit_tail(profile, nodes, axis, 'upper'))
            fits.append(cls._fit_tail(profile[::-1], -nodes[::-1], axis, 'lower'))

        tail_estimate = float(sum(f.mass for f in fits))
        divergent = [f for f in fits if f.model == TailModel.DIVERGENT]
        if divergent:
            sides = ', '.join(f'axis {f.axis} {f.side}' for f in divergent)
            logger.warning(f"Values do not decay toward the boundary ({sides})")
            warnings.warn(
                f'Values do not decay toward the boundary ({sides}); integrability is suspect',
                IntegrabilityWarning,
                stacklevel=2,
            )
        total = constant + tail_estimate
        heavy = not np.isfinite(tail_estimate) or tail_estimate > numerics_setting('TAIL_TOL') * total
        return NormalizationResult(
            constant=constant,
            tail_estimate=tail_estimate,
            heavy_tail=bool(heavy),
            tails=tuple(fits),
        )

    @classmethod
    def _normalized_from_log(cls, log_values, lower, upper, source, allow_heavy_tail, label, metadata=None):
        """
        Exponentiate log-values after a single max shift, then normalize over
        R^d using the extrapolated tails.
        """
        shift = float(np.max(log_values))
        numerator = np.exp(log_values - shift)
        raw = DensityGrid(lower=lower, upper=upper, values=numerator, source=source)
        result = cls.normalization_constant(raw)

        if result.divergent or (result.heavy_tail and not allow_heavy_tail):
            suggested = widen_box(lower, upper)
            raise TruncationError(
                f'{label}: tail mass {result.relative_tail:.3e} outside the box exceeds '
                f'tail_tol {numerics_setting("TAIL_TOL"):.1e}; '
                f'try box {suggested[0].tolist()} .. {suggested[1].tolist()}',
                tail_mass=result.relative_tail,
                suggested_domain=[suggested[0].tolist(), suggested[1].tolist()],
            )
        if result.heavy_tail:
            logger.warning(f"{label}: heavy tail, relative tail mass {result.relative_tail:.3e}")
            warnings.warn(
                f'{label}: relative tail mass {result.relative_tail:.3e} outside the box',
                HeavyTailWarning,
                stacklevel=3,
            )

        total = result.total
        meta = dict(metadata or {})
        meta.update({'box_constant': result.constant, 'tail_estimate': result.tail_estimate})
        return DensityGrid(
            lower=lower,
            upper=upper,
            values=numerator / total,
            normalized=True,
            tails=result.tail_array(len(lower)) / total,
            log_normalizer=shift + float(np.log(total)),
            source=source,
            metadata=meta,
        )

    @classmethod
    def normalize(cls, grid, allow_heavy_tail=True):
        """Normalize an arbitrary nonnegative grid over R^d."""
        if grid.values.max() <= 0:
            raise NumericalDomainError('Cannot normalize a grid of zeros')
        with np.errstate(divide='ignore'):
            log_values = np.log(grid.values)
        return cls._normalized_from_log(
            log_values, grid.lower, grid.upper, grid.source, allow_heavy_tail, 'normalize', grid.metadata,
        )

    # Closed-form invariant densities

    @classmethod
    def closed_form_density_1d(cls, pair, box, n_nodes, allow_heavy_tail=None):
        """
        p = e^U / D / Z with U a primitive of b/D anchored at the box center.

        Args:
            pair: one-dimensional CoefficientPair
            box: (lower, upper)
            n_nodes: odd node count
            allow_heavy_tail: downgrade the truncation error to a HeavyTailWarning;
                defaults to the pair's heavy_tailed flag

        Raises:
            CoefficientDomainError: D <= 0 somewhere on the grid
            TruncationError: tail mass above tail_tol
        """
        if pair.dimension != 1:
            raise CoefficientDomainError(f'closed_form_density_1d needs a 1D pair, got d={pair.dimension}')
        lower, upper, shape, points = cls.grid_nodes(box, n_nodes)
        x = points[:, 0]
        diffusion = pair.diffusion_1d(x)
        drift = pair.drift_1d(x)
        if not np.all(np.isfinite(diffusion)) or np.any(diffusion <= 0):
            bad = int(np.argmin(np.where(np.isfinite(diffusion), diffusion, -np.inf)))
            raise CoefficientDomainError(
                f'Diffusion of {pair.name} is not positive at x={x[bad]:.6g}', pair=pair.name, point=float(x[bad]),
            )
        primitive = quadrature.cumulative(drift / diffusion, x)
        primitive -= primitive[shape[0] // 2]

        if allow_heavy_tail is None:
            allow_heavy_tail = pair.heavy_tailed
        grid = cls._normalized_from_log(
            primitive - np.log(diffusion),
            lower,
            upper,
            DensitySource.CLOSED_FORM,
            allow_heavy_tail,
            f'closed form density of {pair.name}',
            {'pair': pair.name},
        )
        logger.info(f"Closed-form density for {pair.name}: {grid}")
        return grid

    @classmethod
    def gibbs_density(cls, potential, beta, box, nodes_per_axis, allow_heavy_tail=False):
        """
        Gibbs density p = e^{2U/beta} / Z, computed in log space.

        Args:
            potential: callable on (N, d) points, or a Langevin CoefficientPair
            beta: positive inverse-temperature-like noise intensity
            box: (lower, upper); its length fixes d <= 3
            nodes_per_axis: odd count or per-axis counts
        """
        if beta <= 0:
            raise NumericalDomainError(f'beta must be positive, got {beta}')
        evaluate = potential.potential_at if hasattr(potential, 'potential_at') else potential
        lower, upper, shape, points = cls.grid_nodes(box, nodes_per_axis)
        energy = np.asarray(evaluate(points), dtype=float).reshape(shape)
        if not np.all(np.isfinite(energy)):
            raise CoefficientDomainError('Potential is not finite on the grid')
        name = getattr(potential, 'name', 'potential')
        return cls._normalized_from_log(
            2.0 * energy / beta,
            lower,
            upper,
            DensitySource.GIBBS,
            allow_heavy_tail,
            f'Gibbs density of {name}',
            {'beta': float(beta)},
        )

    @classmethod
    def density_from_function(cls, fn, box, nodes, normalized=False):
        """Sample a nonnegative function on a grid (optionally normalize)."""
        lower, upper, shape, points = cls.grid_nodes(box, nodes)
        grid = DensityGrid(lower=lower, upper=upper, values=np.asarray(fn(points), dtype=float).reshape(shape))
        return cls.normalize(grid) if normalized else grid

    # Marginals

    @staticmethod
    def grid_cdf(grid, axis=0):
        """
        Marginal CDF along one axis including the extrapolated lower tail.

        Returns:
            tuple: (nodes, cdf values)
        """
        nodes = grid.nodes[axis]
        profile = quadrature.marginal(grid.values, grid.spacing, axis)
        cdf = quadrature.cumulative(profile, nodes) + grid.tails[axis, 0]
        return nodes, np.clip(cdf, 0.0, 1.0)

    @staticmethod
    def marginal_density(grid, axis=0):
        return grid.nodes[axis], quadrature.marginal(grid.values, grid.spacing, axis)

    # Persistence

    @staticmethod
    def write_grid(grid, path):
        """
        CSV with one row per node (coordinates, value, mask) and a JSON header
        next to it. Floats are written with 17 significant digits.
        """
        path = Path(path)
        columns = {f'x{i + 1}': coords for i, coords in enumerate(grid.points().T)}
        columns['value'] = grid.values.ravel()
        columns['mask'] = GridOperators.log_mask(grid).ravel().astype(int)
        pd.DataFrame(columns).to_csv(path, index=False, float_format='%.17g')

        header = DensityGridHeaderSerializer({
            'dimension': grid.dimension,
            'lower': grid.lower.tolist(),
            'upper': grid.upper.tolist(),
            'shape': list(grid.shape),
            'spacing': grid.spacing.tolist(),
            'mass': grid.mass,
            'tail_mass': grid.tail_mass,
            'tails': grid.tails.tolist(),
            'normalized': grid.normalized,
            'log_normalizer': grid.log_normalizer,
            'source': grid.source,
        }).data
        header_path = path.with_suffix('.json')
        header_path.write_text(json.dumps(header, indent=2))
        return path, header_path

    @staticmethod
    def read_grid(path):
        path = Path(path)
        header = json.loads(path.with_suffix('.json').read_text())
        frame = pd.read_csv(path, float_precision='round_trip')
        values = frame['value'].to_numpy().reshape(header['shape'])
        return DensityGrid(
            lower=header['lower'],
            upper=header['upper'],
            values=values,
            normalized=header['normalized'],
            tails=header['tails'],
            log_normalizer=header['log_normalizer'],
            source=header['source'],
        )


class GridOperators:
    """Central finite differences on grid values."""

    @staticmethod
    def _gradient(values, steps):
        """np.gradient with second-order one-sided boundaries; always a list."""
        grads = np.gradient(values, *steps, edge_order=2)
        return [grads] if values.ndim == 1 else list(grads)

    @staticmethod
    def partial(values, h, axis):
        """First derivative along one axis, second-order everywhere."""
        return np.gradient(values, h, axis=axis, edge_order=2)

    @staticmethod
    def second_derivative(values, h, axis):
        """Central second difference; second-order one-sided at both ends."""
        f = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
        out = np.empty_like(f)
        out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h ** 2
        out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h ** 2
        out[-1] = (2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / h ** 2
        return np.moveaxis(out, 0, axis)

    @staticmethod
    def log_mask(grid):
        """Floor mask dilated by one node so no stencil touches a floored node."""
        mask = grid.floor_mask()
        if mask.any():
            mask = ndimage.binary_dilation(mask, structure=ndimage.generate_binary_structure(grid.dimension, 1))
        return mask

    @classmethod
    def grad_log(cls, grid):
        """
        Gradient of ln p as differences of log-values.

        Returns:
            Masked array of shape (d, *grid.shape); nodes where p is below the
            relative floor (and their stencil neighbours) are masked.
        """
        mask = cls.log_mask(grid)
        tiny = np.finfo(float).tiny
        log_values = np.log(np.maximum(grid.values, tiny))
        components = np.stack(cls._gradient(log_values, grid.spacing), axis=0)
        full_mask = np.broadcast_to(mask, components.shape)
        return np.ma.masked_array(components, mask=full_mask.copy())

    @classmethod
    def laplacian(cls, grid_or_values, steps=None):
        """Sum of second derivatives along every axis."""
        values, steps = cls._values_and_steps(grid_or_values, steps)
        return sum(cls.second_derivative(values, h, axis) for axis, h in enumerate(steps))

    @classmethod
    def divergence(cls, field, steps):
        """
        Divergence of a vector field of shape (d, *shape).
        Masks on masked inputs carry over to the output.
        """
        steps = steps.spacing if hasattr(steps, 'spacing') else steps
        mask = np.ma.getmaskarray(field).any(axis=0) if np.ma.isMaskedArray(field) else None
        data = np.ma.getdata(field)
        total = sum(cls.partial(data[i], steps[i], i) for i in range(data.shape[0]))
        if mask is not None:
            return np.ma.masked_array(total, mask=mask)
        return total

    @staticmethod
    def _values_and_steps(grid_or_values, steps):
        if isinstance(grid_or_values, DensityGrid):
            return grid_or_values.values, grid_or_values.spacing
        if steps is None:
            raise NumericalDomainError('Grid spacing is required for raw arrays')
        return np.asarray(grid_or_values, dtype=float), np.atleast_1d(steps)


class FokkerPlanckService:
    """Strong and weak stationary Fokker-Planck residuals of a density against a coefficient pair."""

    DEFAULT_INTERIOR_MARGIN = 2
    BUMP_RADIUS_FRACTION = 0.15

    @staticmethod
    def coefficient_fields(grid, pair):
        """Drift (d, *shape) and diffusion (d, d, *shape) on the grid nodes."""
        if pair.dimension != grid.dimension:
            raise CoefficientDomainError(
                f'Pair dimension {pair.dimension} does not match grid dimension {grid.dimension}'
            )
        points = grid.points()
        drift = np.moveaxis(pair.drift_at(points).reshape(*grid.shape, grid.dimension), -1, 0)
        diffusion = pair.diffusion_at(points).reshape(*grid.shape, grid.dimension, grid.dimension)
        return drift, np.moveaxis(diffusion, (-2, -1), (0, 1))

    @staticmethod
    def fokker_planck_operator(values, drift, diffusion, steps):
        """Strong form d_i d_j (D^ij p) - d_i (b^i p) on every node."""
        d = values.ndim
        result = np.zeros_like(values)
        for i in range(d):
            for j in range(d):
                flux = diffusion[i, j] * values
                if i == j:
                    result += GridOperators.second_derivative(flux, steps[i], i)
                else:
                    result += GridOperators.partial(GridOperators.partial(flux, steps[j], j), steps[i], i)
            result -= GridOperators.partial(drift[i] * values, steps[i], i)
        return result

    @classmethod
    def bump_centers(cls, grid, count, radius):
        """Fixed Halton centers keeping each bump inside the box."""
        sampler = qmc.Halton(d=grid.dimension, scramble=False)
        sampler.fast_forward(1)
        unit = sampler.random(count)
        margin = radius + cls.DEFAULT_INTERIOR_MARGIN * grid.spacing
        low = grid.lower + margin
        high = grid.upper - margin
        return low + (high - low) * unit

    @classmethod
    def weak_form_values(cls, grid, drift, diffusion, count=None):
        """
        Integrals of the residual against C-infinity bumps
        phi = exp(-1/(1 - s)), s = |x - c|^2 / r^2, after integrating by parts:
        int D^ij p d_i d_j phi + b^i p d_i phi.
        """
        count = count or numerics_setting('WEAK_FORM_BUMPS')
        radius = cls.BUMP_RADIUS_FRACTION * float(np.min(grid.upper - grid.lower))
        centers = cls.bump_centers(grid, count, radius)
        mesh = grid.mesh()
        p = grid.values
        values = []
        for k, center in enumerate(centers):
            y = [mesh[i] - center[i] for i in range(grid.dimension)]
            s = sum(component ** 2 for component in y) / radius ** 2
            inside = s < 1.0
            one_minus = np.where(inside, 1.0 - s, 1.0)
            phi = np.where(inside, np.exp(-1.0 / one_minus), 0.0)
            dphi = np.where(inside, -phi / one_minus ** 2, 0.0)
            d2phi = np.where(inside, phi / one_minus ** 4 - 2.0 * phi / one_minus ** 3, 0.0)
            integrand = np.zeros_like(p)
            for i in range(grid.dimension):
                grad_i = dphi * 2.0 * y[i] / radius ** 2
                integrand += drift[i] * p * grad_i
                for j in range(grid.dimension):
                    hess = d2phi * (2.0 * y[i] / radius ** 2) * (2.0 * y[j] / radius ** 2)
                    if i == j:
                        hess = hess + dphi * 2.0 / radius ** 2
                    integrand += diffusion[i, j] * p * hess
            values.append((f'bump-{k}', quadrature.integrate(integrand, grid.spacing)))
        return tuple(values)

    @classmethod
    def fp_residual(cls, grid, pair, interior_margin=DEFAULT_INTERIOR_MARGIN):
        """
        Stationary Fokker-Planck residual of a density grid for a pair.

        Norms cover interior nodes only (interior_margin boundary layers
        excluded) and skip floored nodes.
        """
        drift, diffusion = cls.coefficient_fields(grid, pair)
        residual = cls.fokker_planck_operator(grid.values, drift, diffusion, grid.spacing)
        interior = tuple(slice(interior_margin, -interior_margin) for _ in range(grid.dimension))
        mask = GridOperators.log_mask(grid)[interior]
        r = residual[interior][~mask]
        linf = float(np.max(np.abs(r))) if r.size else 0.0
        l2 = float(np.sqrt(np.sum(r ** 2) * grid.cell_volume))
        report = ResidualReport(
            linf=linf,
            l2=l2,
            weak_form_values=cls.weak_form_values(grid, drift, diffusion),
            interior_margin=interior_margin,
            masked_nodes=int(mask.sum()),
        )
        logger.info(f"FP residual for {pair.name}: linf={linf:.3e}, l2={l2:.3e}, weak={report.weak_max:.3e}")
        return report
