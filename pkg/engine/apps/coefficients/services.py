"""
Services for the coefficients app.
Construction of coefficient pairs and sampled checks of the structural
conditions (monotonicity, coercivity, polynomial growth, ellipticity).
"""

import logging
import math
import warnings

import numpy as np
import sympy as sp
from scipy.stats import qmc

from core.utils.boxes import as_box
from core.utils.exceptions import (
    CoefficientSpecError,
    DegenerateDiffusionWarning,
    NumericalDomainError,
)
from core.utils.numerics import numerics_setting

from . import fields
from .models import CoefficientKind, CoefficientPair, ConditionReport, ConditionTag, Violation

logger = logging.getLogger(__name__)


class CoefficientService:
    """
    Service for building coefficient pairs from expressions and polynomials.
    """

    DEFAULT_SIGMA = 'sqrt(2)'
    # relative slack on 2 a_{2k+1} + c_{k+1}^2 < 0
    BALANCE_RELATIVE_SLACK = 1e-12

    @staticmethod
    def pair_from_expressions(drift=None, sigma=DEFAULT_SIGMA, dimension=1, kind=None,
                              potential=None, beta=None, name='custom', noise_dimension=None,
                              heavy_tailed=False):
        """
        Build a pair from expression strings or sympy objects.

        Given a potential and beta the pair is Langevin: b = grad U and
        sigma = sqrt(beta) Id, unless an explicit kind overrides it.

        Example:
            >>> CoefficientService.pair_from_expressions(drift='-x', sigma='sqrt(2)').drift_1d([1.0])
            array([-1.])
        """
        symbols = fields.coordinate_symbols(dimension)
        potential_expr = None

        if potential is not None:
            potential_expr = fields.parse_expression(potential, symbols)
            if drift is None:
                drift_exprs = fields.gradient(potential_expr, symbols)
            else:
                drift_exprs = fields.parse_vector(drift, symbols)
            if beta is None:
                raise CoefficientSpecError('langevin', 'A potential needs an inverse temperature beta')
            sigma_matrix = sp.sqrt(sp.nsimplify(beta, rational=True)) * sp.eye(dimension)
            kind = kind or CoefficientKind.LANGEVIN
        else:
            if drift is None:
                raise CoefficientSpecError('expression', 'Either a drift or a potential is required')
            drift_exprs = fields.parse_vector(drift, symbols)
            sigma_matrix = fields.parse_matrix(sigma, symbols, noise_dimension)
            if kind is None:
                additive = fields.is_constant(sigma_matrix, symbols)
                kind = CoefficientKind.ADDITIVE if additive else CoefficientKind.GENERAL

        return CoefficientPair(
            dimension=dimension,
            noise_dimension=sigma_matrix.shape[1],
            drift=fields.vector_field(drift_exprs, symbols),
            sigma=fields.matrix_field(sigma_matrix, symbols),
            kind=kind,
            potential=fields.scalar_field(potential_expr, symbols) if potential_expr is not None else None,
            beta=float(beta) if beta is not None else None,
            name=name,
            metadata={
                'heavy_tailed': heavy_tailed,
                'expressions': {
                    'symbols': symbols,
                    'drift': drift_exprs,
                    'sigma': sigma_matrix,
                    'potential': potential_expr,
                },
            },
        )

    @staticmethod
    def diffusion_tensor(pair, x):
        """
        D(x) = sigma(x) sigma(x)^T / 2 at a single point.
        Warns when D is not positive definite.
        """
        tensor = pair.diffusion_at(x)[0]
        smallest = float(np.linalg.eigvalsh(tensor)[0])
        if smallest <= numerics_setting('STRICT_SLACK'):
            logger.warning(f"Degenerate diffusion for {pair.name}: smallest eigenvalue {smallest:.3e}")
            warnings.warn(
                f'Diffusion tensor of {pair.name} is not positive definite (min eigenvalue {smallest:.3e})',
                DegenerateDiffusionWarning,
                stacklevel=2,
            )
        return tensor

    @classmethod
    def polynomial_pair(cls, drift_coeffs, sigma_coeffs, name='polynomial'):
        """
        One-dimensional pair with polynomial coefficients (lowest degree first).

        Requires an odd-degree drift b of degree 2k+1 with negative leading
        coefficient, deg(sigma) <= k+1, and 2 a_{2k+1} + c_{k+1}^2 < 0 when
        sigma reaches degree k+1.
        """
        b = np.polynomial.Polynomial(np.asarray(drift_coeffs, dtype=float)).trim()
        s = np.polynomial.Polynomial(np.asarray(sigma_coeffs, dtype=float)).trim()
        degree_b, degree_s = b.degree(), s.degree()
        if degree_b % 2 == 0 or b.coef[-1] >= 0:
            raise CoefficientSpecError(
                'leading_coefficient',
                f'Drift must have odd degree and negative leading coefficient (degree {degree_b}, '
                f'leading {b.coef[-1]:g})',
            )
        if 2 * degree_s > degree_b + 1:
            raise CoefficientSpecError(
                'polynomial_balance',
                f'Noise degree {degree_s} too large for drift degree {degree_b}',
            )
        if 2 * degree_s == degree_b + 1:
            leading_b, leading_s = b.coef[-1], s.coef[-1]
            balance = 2.0 * leading_b + leading_s ** 2
            if balance >= -cls.BALANCE_RELATIVE_SLACK * max(abs(2.0 * leading_b), leading_s ** 2):
                raise CoefficientSpecError(
                    'polynomial_balance',
                    f'2 a_{degree_b} + c_{degree_s}^2 = {balance:.6g} must be negative',
                    balance=float(balance),
                )
        x = fields.coordinate_symbols(1)[0]
        drift_expr = sum(sp.Float(c) * x ** k for k, c in enumerate(b.coef))
        sigma_expr = sum(sp.Float(c) * x ** k for k, c in enumerate(s.coef))
        return cls.pair_from_expressions(drift=[drift_expr], sigma=sp.Matrix([[sigma_expr]]), name=name)

    @staticmethod
    def skew_matrix(entries, dimension=None):
        """
        Antisymmetric matrix from a full square matrix (projected onto its
        skew part) or from the strictly upper-triangular entries in row order.

        Example:
            >>> CoefficientService.skew_matrix([1.0])
            array([[ 0.,  1.],
                   [-1.,  0.]])
        """
        arr = np.asarray(entries, dtype=float)
        if arr.ndim == 2:
            if arr.shape[0] != arr.shape[1]:
                raise CoefficientSpecError('skew', f'Matrix of shape {arr.shape} is not square')
            return 0.5 * (arr - arr.T)
        arr = np.ravel(arr)
        if dimension is None:
            dimension = int(round((1.0 + math.sqrt(1.0 + 8.0 * arr.size)) / 2.0))
        if arr.size != dimension * (dimension - 1) // 2:
            raise CoefficientSpecError('skew', f'{arr.size} entries do not fill a {dimension}x{dimension} skew matrix')
        upper = np.zeros((dimension, dimension))
        upper[np.triu_indices(dimension, 1)] = arr
        return upper - upper.T

    @staticmethod
    def is_skew(matrix, tol=1e-12):
        matrix = np.asarray(matrix, dtype=float)
        return matrix.ndim == 2 and matrix.shape[0] == matrix.shape[1] and np.allclose(matrix, -matrix.T, atol=tol)


class ConditionService:
    """
    Service for sampled estimates of the structural condition constants.
    Estimates are sampled, not proven bounds.
    """

    DEFAULT_SAMPLES = 4096
    # points with |x| above this fraction of the sampled maximum enter the tail fits
    OUTER_RADIUS_FRACTION = 0.5

    @staticmethod
    def _sobol_points(dimension, n_samples, seed):
        sampler = qmc.Sobol(d=dimension, scramble=True, seed=seed)
        return sampler.random_base2(max(1, math.ceil(math.log2(n_samples))))[:n_samples]

    @classmethod
    def check_conditions(cls, pair, box, n_samples=None, seed=0):
        """
        Estimate the constants of the structural conditions on a box.

        Args:
            pair: CoefficientPair
            box: (lower, upper) bounds, one entry per axis
            n_samples: number of Sobol sample pairs (>= 2, default DEFAULT_SAMPLES)
            seed: scrambling seed

        Returns:
            ConditionReport. Estimates are sampled, not proven bounds:
            a pass is necessary evidence only.
        """
        if n_samples is None:
            n_samples = cls.DEFAULT_SAMPLES
        if n_samples < 2:
            raise NumericalDomainError('n_samples must be at least 2', n_samples=n_samples)
        lower, upper = as_box(*box)
        d = pair.dimension
        if lower.shape[0] != d:
            raise NumericalDomainError(f'Box has {lower.shape[0]} axes, pair has dimension {d}')
        slack = numerics_setting('STRICT_SLACK')

        unit = cls._sobol_points(2 * d, n_samples, seed)
        x = lower + (upper - lower) * unit[:, :d]
        y = lower + (upper - lower) * unit[:, d:]

        bx, by = pair.drift_at(x), pair.drift_at(y)
        sx, sy = pair.sigma_at(x), pair.sigma_at(y)
        violations = []

        finite_x = np.isfinite(bx).all(axis=1) & np.isfinite(sx).all(axis=(1, 2))
        finite = finite_x & np.isfinite(by).all(axis=1) & np.isfinite(sy).all(axis=(1, 2))
        if not finite.all():
            bad = int(np.argmin(finite_x)) if not finite_x.all() else int(np.argmin(finite))
            point = x[bad] if not finite_x.all() else y[bad]
            violations.append(Violation(ConditionTag.FINITE, tuple(point), float('nan')))
            x, y = x[finite], y[finite]
            bx, by, sx, sy = bx[finite], by[finite], sx[finite], sy[finite]
        if x.shape[0] < 2:
            raise NumericalDomainError(f'Coefficients of {pair.name} are not finite on the box')

        # One-sided Lipschitz: 2<b(x)-b(y), x-y> + |sigma(x)-sigma(y)|_F^2 <= L0 |x-y|^2
        delta = x - y
        dist2 = np.sum(delta ** 2, axis=1)
        separated = dist2 > 0
        mono = (2.0 * np.sum((bx - by) * delta, axis=1) + np.sum((sx - sy) ** 2, axis=(1, 2)))
        monotone_constant = float(np.max(mono[separated] / dist2[separated]))

        # Coercivity: 2<b(x), x> + |sigma(x)|_F^2 <= L1 - L2 |x|^2
        f = 2.0 * np.sum(bx * x, axis=1) + np.sum(sx ** 2, axis=(1, 2))
        r2 = np.sum(x ** 2, axis=1)
        r = np.sqrt(r2)
        outer = r >= cls.OUTER_RADIUS_FRACTION * r.max()
        outer &= r2 > 0
        ratio = f[outer] / r2[outer]
        l2 = float(-np.max(ratio))
        l1 = float(np.max(f + l2 * r2))
        if l2 <= slack:
            worst = np.flatnonzero(outer)[int(np.argmax(ratio))]
            violations.append(Violation(ConditionTag.COERCIVE, tuple(x[worst]), l2))

        # Polynomial growth: |b(x)| <= L3 + L4 |x|^q
        norm_b = np.linalg.norm(bx, axis=1)
        fit = outer & (norm_b > 0)
        exponent = 1.0
        if fit.sum() >= 2 and np.ptp(np.log(r[fit])) > 0:
            exponent = max(1.0, float(np.polyfit(np.log(r[fit]), np.log(norm_b[fit]), 1)[0]))
        l4 = float(np.max(norm_b[outer] / r[outer] ** exponent)) if outer.any() else 0.0
        l3 = float(max(0.0, np.max(norm_b - l4 * r ** exponent)))

        # Ellipticity: <D(x) xi, xi> >= L5 |xi|^2
        diffusion = 0.5 * np.einsum('nik,njk->nij', sx, sx)
        eigen = np.linalg.eigvalsh(diffusion)[:, 0]
        min_eigen = float(eigen.min())
        if min_eigen <= slack:
            worst = int(np.argmin(eigen))
            violations.append(Violation(ConditionTag.NONDEGENERATE, tuple(x[worst]), min_eigen))

        report = ConditionReport(
            pair_name=pair.name,
            box=(tuple(lower), tuple(upper)),
            n_samples=n_samples,
            seed=seed,
            monotone_constant=monotone_constant,
            coercive_constants=(l1, l2),
            growth_constants=(l3, l4),
            growth_exponent=exponent,
            min_diffusion_eigenvalue=min_eigen,
            violations=tuple(violations),
        )
        logger.info(
            f"Conditions for {pair.name}: {report.verdict} "
            f"(L0={monotone_constant:.4g}, L2={l2:.4g}, L5={min_eigen:.4g})"
        )
        return report
