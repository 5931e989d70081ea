"""
Density grids and the reports produced by density operators.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from django.db import models
from django.utils.translation import gettext_lazy as _

from core.utils.boxes import as_box
from core.utils.exceptions import ConfigError, NumericalDomainError
from core.utils.numerics import numerics_setting

from . import quadrature

MAX_GRID_DIMENSION = 3
NORMALIZATION_TOLERANCE = 1e-8


class TailModel(models.TextChoices):
    EXPONENTIAL = 'exponential', _('Exponential decay')
    POWER = 'power', _('Power-law decay')
    DIVERGENT = 'divergent', _('Not decaying')
    NONE = 'none', _('Vanishing')


class DensitySource(models.TextChoices):
    CLOSED_FORM = 'closed_form', _('Closed form')
    GIBBS = 'gibbs', _('Gibbs')
    HISTOGRAM = 'histogram', _('Histogram')
    KDE = 'kde', _('Kernel density estimate')
    FUNCTION = 'function', _('Sampled function')


def check_shape(shape, dimension):
    """Per-axis odd node counts of at least MIN_NODES_PER_AXIS."""
    if np.isscalar(shape):
        shape = (int(shape),) * dimension
    shape = tuple(int(n) for n in shape)
    if len(shape) != dimension:
        raise ConfigError(f'Grid shape {shape} does not match dimension {dimension}', key='nodes')
    minimum = numerics_setting('MIN_NODES_PER_AXIS')
    for n in shape:
        if n < minimum:
            raise ConfigError(f'At least {minimum} nodes per axis are required, got {n}', key='nodes')
        if n % 2 == 0:
            raise ConfigError(f'Simpson quadrature needs odd node counts, got {n}', key='nodes')
    return shape


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """
    Nonnegative values on a uniform tensor grid over a box.

    Normalized grids integrate to one over R^d: the mass inside the box
    plus the extrapolated tail masses in `tails` (shape (d, 2), lower and
    upper side per axis).
    """
    lower: np.ndarray
    upper: np.ndarray
    values: np.ndarray
    normalized: bool = False
    tails: Optional[np.ndarray] = None
    log_normalizer: Optional[float] = None
    source: str = DensitySource.FUNCTION
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        lower, upper = as_box(self.lower, self.upper)
        values = np.array(self.values, dtype=float)
        if lower.shape[0] > MAX_GRID_DIMENSION:
            raise NumericalDomainError(f'Grids support at most {MAX_GRID_DIMENSION} dimensions')
        if values.ndim != lower.shape[0]:
            raise NumericalDomainError(f'Values of rank {values.ndim} on a {lower.shape[0]}-dimensional box')
        check_shape(values.shape, values.ndim)
        if not np.all(np.isfinite(values)):
            raise NumericalDomainError('Density values must be finite')
        if np.any(values < 0):
            raise NumericalDomainError(f'Density values must be nonnegative (min {values.min():.3e})')
        tails = np.zeros((values.ndim, 2)) if self.tails is None else np.array(self.tails, dtype=float)
        for name, arr in (('lower', lower), ('upper', upper), ('values', values), ('tails', tails)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dimension(self):
        return self.values.ndim

    @property
    def shape(self):
        return self.values.shape

    @property
    def spacing(self):
        return quadrature.spacing(self.lower, self.upper, self.shape)

    @property
    def nodes(self):
        return quadrature.axis_nodes(self.lower, self.upper, self.shape)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def mesh(self):
        return np.meshgrid(*self.nodes, indexing='ij')

    def points(self):
        """Node coordinates as an (N, d) array in C order."""
        return np.stack([axis.ravel() for axis in self.mesh()], axis=1)

    @property
    def mass(self):
        return quadrature.integrate(self.values, self.spacing)

    @property
    def tail_mass(self):
        return float(np.sum(self.tails))

    @property
    def total_mass(self):
        return self.mass + self.tail_mass

    def floor_mask(self):
        """Nodes too small for logarithmic operators."""
        floor = numerics_setting('P_FLOOR_RELATIVE') * float(self.values.max())
        return self.values <= floor

    def with_values(self, values, **changes):
        params = {
            'lower': self.lower,
            'upper': self.upper,
            'values': values,
            'normalized': False,
            'tails': None,
            'log_normalizer': None,
            'source': self.source,
            'metadata': dict(self.metadata),
        }
        params.update(changes)
        return DensityGrid(**params)

    def __str__(self):
        return f'DensityGrid({self.source}, shape={self.shape}, mass={self.mass:.6g})'


@dataclass(frozen=True)
class TailFit:
    axis: int
    side: str
    model: str
    rate: float
    mass: float
    boundary_value: float


@dataclass(frozen=True)
class NormalizationResult:
    """
    Box quadrature `constant` and the extrapolated mass outside the box.
    `heavy_tail` is set when the tail exceeds tail_tol relative to the total.
    """
    constant: float
    tail_estimate: float
    heavy_tail: bool
    tails: tuple = ()

    @property
    def total(self):
        return self.constant + self.tail_estimate

    @property
    def divergent(self):
        return not np.isfinite(self.tail_estimate)

    @property
    def relative_tail(self):
        if self.divergent:
            return float('inf')
        return self.tail_estimate / self.total if self.total > 0 else float('inf')

    def tail_array(self, dimension):
        out = np.zeros((dimension, 2))
        for fit in self.tails:
            out[fit.axis, 0 if fit.side == 'lower' else 1] = fit.mass
        return out


@dataclass(frozen=True)
class ResidualReport:
    linf: float
    l2: float
    weak_form_values: tuple
    interior_margin: int
    masked_nodes: int = 0

    @property
    def weak_max(self):
        if not self.weak_form_values:
            return 0.0
        return max(abs(value) for _, value in self.weak_form_values)
