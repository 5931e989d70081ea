"""
Coefficient pairs (drift b, noise sigma) and condition reports.

Fields are vectorized: every callable takes points of shape (n, d)
and returns drift (n, d), sigma (n, d, m) or potential (n,).
"""

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np
from django.db import models
from django.utils.translation import gettext_lazy as _
from scipy.stats import qmc

from core.utils.exceptions import CoefficientDomainError, CoefficientSpecError
from core.utils.numerics import numerics_setting


class CoefficientKind(models.TextChoices):
    GENERAL = 'general', _('General')
    ADDITIVE = 'additive', _('Additive noise')
    LANGEVIN = 'langevin', _('Langevin')


class ConditionTag(models.TextChoices):
    MONOTONE = 'mon', _('One-sided Lipschitz')
    COERCIVE = 'coe', _('Coercivity')
    GROWTH = 'pol', _('Polynomial growth')
    NONDEGENERATE = 'non', _('Uniform ellipticity')
    FINITE = 'fin', _('Finite evaluation')


class Verdict(models.TextChoices):
    PASS = 'pass', _('Pass')
    FAIL = 'fail', _('Fail')


# Points where structural claims of a pair are checked at construction
_CHECK_POINT_COUNT = 16
_CHECK_RADIUS = 2.0


def as_points(x, dimension):
    """Coerce a point or a batch of points to an array of shape (n, d)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dimension != 1:
            raise CoefficientDomainError(f'Scalar point given for dimension {dimension}')
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        if dimension == 1:
            return arr.reshape(-1, 1)
        if arr.shape[0] == dimension:
            return arr.reshape(1, dimension)
    if arr.ndim == 2 and arr.shape[1] == dimension:
        return arr
    raise CoefficientDomainError(f'Points of shape {arr.shape} do not match dimension {dimension}')


def check_points(dimension):
    """Deterministic Halton points in [-2, 2]^d."""
    sampler = qmc.Halton(d=dimension, scramble=False)
    sampler.fast_forward(1)
    return (2.0 * sampler.random(_CHECK_POINT_COUNT) - 1.0) * _CHECK_RADIUS


@dataclass(frozen=True)
class CoefficientPair:
    """
    Immutable drift/noise pair of an SDE dX = b(X) dt + sigma(X) dW.

    Langevin pairs carry a potential U and an inverse temperature beta with
    b = grad U and sigma = sqrt(beta) Id.
    """
    dimension: int
    noise_dimension: int
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    kind: str = CoefficientKind.GENERAL
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None
    beta: Optional[float] = None
    name: str = 'custom'
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 1 or self.noise_dimension < 1:
            raise CoefficientSpecError('dimension', 'Dimensions must be positive')
        if self.kind not in CoefficientKind.values:
            raise CoefficientSpecError('kind', f'Unknown coefficient kind {self.kind!r}')
        object.__setattr__(self, 'metadata', MappingProxyType(dict(self.metadata)))

        points = check_points(self.dimension)
        sig = self.sigma_at(points)
        if self.kind in (CoefficientKind.ADDITIVE, CoefficientKind.LANGEVIN):
            if not np.allclose(sig, sig[0], rtol=0.0, atol=1e-12):
                raise CoefficientSpecError('additive_noise', 'Noise must be constant for additive and Langevin pairs')
        if self.kind == CoefficientKind.LANGEVIN:
            self._check_langevin(points, sig)

    def _check_langevin(self, points, sig):
        if self.potential is None or self.beta is None or self.beta <= 0:
            raise CoefficientSpecError('langevin', 'Langevin pairs need a potential and beta > 0')
        if self.noise_dimension != self.dimension:
            raise CoefficientSpecError('langevin', 'Langevin noise must be square')
        expected = np.sqrt(self.beta) * np.eye(self.dimension)
        if not np.allclose(sig[0], expected, rtol=0.0, atol=1e-12):
            raise CoefficientSpecError('langevin_sigma', 'Langevin noise must equal sqrt(beta) Id')

        h = numerics_setting('FD_STEP')
        tol = numerics_setting('TOL_FD')
        grad = np.empty_like(points)
        for i in range(self.dimension):
            step = np.zeros(self.dimension)
            step[i] = h
            grad[:, i] = (self.potential_at(points + step) - self.potential_at(points - step)) / (2.0 * h)
        gap = float(np.max(np.abs(self.drift_at(points) - grad)))
        if not gap <= tol:
            raise CoefficientSpecError(
                'gradient_consistency',
                f'Drift differs from grad U by {gap:.3e} (tolerance {tol:.1e})',
                gap=gap,
            )

    # Evaluation

    def _evaluate(self, fn, points, shape, label):
        try:
            with np.errstate(all='ignore'):
                out = np.asarray(fn(points), dtype=float)
        except (ArithmeticError, ValueError, TypeError) as exc:
            raise CoefficientDomainError(f'{label} evaluation failed: {exc}', pair=self.name) from exc
        if out.shape != shape:
            try:
                out = np.broadcast_to(out, shape).copy()
            except ValueError as exc:
                raise CoefficientDomainError(
                    f'{label} returned shape {out.shape}, expected {shape}', pair=self.name
                ) from exc
        return out

    def drift_at(self, x):
        pts = as_points(x, self.dimension)
        return self._evaluate(self.drift, pts, (pts.shape[0], self.dimension), 'Drift')

    def sigma_at(self, x):
        pts = as_points(x, self.dimension)
        return self._evaluate(
            self.sigma, pts, (pts.shape[0], self.dimension, self.noise_dimension), 'Noise'
        )

    def diffusion_at(self, x):
        """D = sigma sigma^T / 2, shape (n, d, d)."""
        sig = self.sigma_at(x)
        return 0.5 * np.einsum('nik,njk->nij', sig, sig)

    def potential_at(self, x):
        if self.potential is None:
            raise CoefficientDomainError('Pair has no potential', pair=self.name)
        pts = as_points(x, self.dimension)
        return self._evaluate(self.potential, pts, (pts.shape[0],), 'Potential')

    def drift_1d(self, x):
        self._require_1d()
        return self.drift_at(np.ravel(x))[:, 0]

    def diffusion_1d(self, x):
        self._require_1d()
        return self.diffusion_at(np.ravel(x))[:, 0, 0]

    def _require_1d(self):
        if self.dimension != 1:
            raise CoefficientDomainError(f'Pair {self.name} is {self.dimension}-dimensional')

    @property
    def is_langevin(self):
        return self.kind == CoefficientKind.LANGEVIN

    @property
    def has_constant_noise(self):
        return self.kind in (CoefficientKind.ADDITIVE, CoefficientKind.LANGEVIN)

    @property
    def heavy_tailed(self):
        return bool(self.metadata.get('heavy_tailed', False))

    @property
    def expressions(self):
        return self.metadata.get('expressions')

    def with_name(self, name):
        return CoefficientPair(
            dimension=self.dimension,
            noise_dimension=self.noise_dimension,
            drift=self.drift,
            sigma=self.sigma,
            kind=self.kind,
            potential=self.potential,
            beta=self.beta,
            name=name,
            metadata=dict(self.metadata),
        )

    def __str__(self):
        return f'{self.name} ({self.kind}, d={self.dimension})'


@dataclass(frozen=True)
class Violation:
    condition: str
    point: tuple
    value: float


@dataclass(frozen=True)
class ConditionReport:
    """
    Sampled constants of the monotonicity, coercivity, growth and
    ellipticity conditions on a box. A pass is sampled evidence, not a proof.
    """
    pair_name: str
    box: tuple
    n_samples: int
    seed: int
    monotone_constant: float
    coercive_constants: tuple
    growth_constants: tuple
    growth_exponent: float
    min_diffusion_eigenvalue: float
    violations: tuple = ()
    label: str = 'sampled, not proven'

    @property
    def verdict(self):
        return Verdict.FAIL if self.violations else Verdict.PASS

    @property
    def passed(self):
        return self.verdict == Verdict.PASS

    @property
    def failed_conditions(self):
        return sorted({v.condition for v in self.violations})
