"""
Spectral Galerkin types for the reaction-diffusion equation on (0, 1)
with Dirichlet boundary: sine modes, the spatial quadrature used for the
nonlinearity, reaction terms and run configuration.

Modes are e_k(xi) = sqrt(2) sin(k pi xi) with eigenvalues (k pi)^2 of -Laplacian.
"""

import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional, Union

import numpy as np
from django.db import models
from django.utils.translation import gettext_lazy as _
from scipy.integrate import simpson

from apps.coefficients.models import Verdict
from apps.simulation.models import InitialState, SimConfig
from core.utils.exceptions import ConfigError, NumericalDomainError, QuadratureResolutionWarning


class TimeScheme(models.TextChoices):
    SEMI_IMPLICIT = 'semi_implicit', _('Linear-implicit Euler')
    EXPONENTIAL = 'exponential', _('Exponential Euler')


def eigenvalues(n_modes):
    k = np.arange(1, int(n_modes) + 1, dtype=float)
    return (k * np.pi) ** 2


def sine_basis(xi, n_modes):
    """Basis values of shape (len(xi), n_modes)."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 1)
    k = np.arange(1, int(n_modes) + 1, dtype=float)
    return np.sqrt(2.0) * np.sin(np.pi * xi * k)


@dataclass(frozen=True, eq=False)
class SpectralState:
    """Coordinates of a field on the first N sine modes."""
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).ravel()
        if coeffs.size < 1:
            raise NumericalDomainError('A spectral state needs at least one mode')
        coeffs.setflags(write=False)
        object.__setattr__(self, 'coeffs', coeffs)

    @classmethod
    def single_mode(cls, k, amplitude, n_modes):
        coeffs = np.zeros(n_modes)
        coeffs[k - 1] = amplitude
        return cls(coeffs)

    @property
    def n_modes(self):
        return self.coeffs.size

    @property
    def eigenvalues(self):
        return eigenvalues(self.n_modes)

    def evaluate(self, xi):
        """x(xi); zero at xi = 0 and xi = 1 up to rounding of sin(k pi)."""
        xi = np.asarray(xi, dtype=float)
        values = sine_basis(xi, self.n_modes) @ self.coeffs
        boundary = (xi.ravel() == 0.0) | (xi.ravel() == 1.0)
        values[boundary] = 0.0
        return values.reshape(xi.shape)


class SpatialQuadrature:
    """
    Composite Simpson rule on uniform nodes of [0, 1] together with the
    sine basis sampled there. Coefficient arrays carry modes on the last axis.
    """

    def __init__(self, n_modes, nodes=None):
        nodes = 4 * int(n_modes) + 1 if nodes is None else int(nodes)
        if nodes < 3 or nodes % 2 == 0:
            raise ConfigError(f'Quadrature node count must be odd and >= 3, got {nodes}',
                              section='spde', key='quadrature_nodes')
        if n_modes > nodes / 2:
            warnings.warn(
                f'{n_modes} modes on {nodes} quadrature nodes; products of modes are under-resolved',
                QuadratureResolutionWarning,
                stacklevel=2,
            )
        self.n_modes = int(n_modes)
        self.xi = np.linspace(0.0, 1.0, nodes)
        self.weights = simpson(np.eye(nodes), dx=1.0 / (nodes - 1), axis=1)
        self.basis = sine_basis(self.xi, self.n_modes)
        self.basis[[0, -1]] = 0.0

    @property
    def nodes(self):
        return self.xi.size

    def field(self, coeffs):
        """Field values (..., nodes) of coefficient arrays (..., N)."""
        return np.asarray(coeffs, dtype=float) @ self.basis.T

    def project(self, values):
        """<e_k, f> for every mode; values (..., nodes) -> (..., N)."""
        return (np.asarray(values, dtype=float) * self.weights) @ self.basis

    def integrate(self, values):
        return np.asarray(values, dtype=float) @ self.weights


@dataclass(frozen=True)
class Reaction:
    """
    Reaction potential U(u) with derivative U'(u), evaluated elementwise.
    linear_rate is alpha when U = -alpha u^2 / 2 exactly.
    """
    name: str
    potential: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    curvature: Callable[[np.ndarray], np.ndarray]
    linear_rate: Optional[float] = None
    bounded_above: bool = False
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'metadata', MappingProxyType(dict(self.metadata)))

    @property
    def expression(self):
        return self.metadata.get('expression')

    def scaled(self, factor):
        """c U with derivatives scaled alike."""
        c = float(factor)
        expression = None if self.expression is None else c * self.expression
        return Reaction(
            name=f'{self.name}*{c:g}',
            potential=lambda u: c * self.potential(u),
            derivative=lambda u: c * self.derivative(u),
            curvature=lambda u: c * self.curvature(u),
            linear_rate=None if self.linear_rate is None else c * self.linear_rate,
            bounded_above=self.bounded_above,
            metadata={**self.metadata, 'expression': expression},
        )


@dataclass(frozen=True)
class SpdeConfig:
    """
    Run parameters of the Galerkin system. Sampling bookkeeping (burn-in,
    thinning) follows SimConfig.
    """
    reaction: Reaction
    n_modes: int = 16
    dt: float = 1e-3
    n_steps: int = 200_000
    n_chains: int = 16
    burn_in_fraction: float = 0.5
    thinning: int = 1
    seed: int = 0
    beta: float = 2.0
    quadrature_nodes: Optional[int] = None
    scheme: str = TimeScheme.SEMI_IMPLICIT
    x0: Union[str, tuple] = InitialState.ORIGIN

    def __post_init__(self):
        if self.n_modes < 1:
            raise ConfigError('n_modes must be at least 1', section='spde', key='n_modes')
        if not self.beta > 0:
            raise ConfigError(f'beta must be positive, got {self.beta}', section='spde', key='beta')
        if self.scheme not in TimeScheme.values:
            raise ConfigError(f'Unknown time scheme {self.scheme!r}', section='spde', key='scheme')
        if self.quadrature_nodes is None:
            object.__setattr__(self, 'quadrature_nodes', 4 * self.n_modes + 1)
        self.simulation  # validates the sampling fields

    @property
    def simulation(self):
        return SimConfig(
            dt=self.dt,
            n_steps=self.n_steps,
            n_chains=self.n_chains,
            burn_in_fraction=self.burn_in_fraction,
            thinning=self.thinning,
            seed=self.seed,
            x0=self.x0,
        )

    @property
    def eigenvalues(self):
        return eigenvalues(self.n_modes)

    @property
    def stiffness(self):
        """dt * lambda_N; the linear part is stable at any value."""
        return float(self.dt * self.eigenvalues[-1])

    def quadrature(self):
        return SpatialQuadrature(self.n_modes, self.quadrature_nodes)

    def replace(self, **changes):
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        if 'n_modes' in changes and 'quadrature_nodes' not in changes:
            values['quadrature_nodes'] = None
        return SpdeConfig(**values)


@dataclass(frozen=True, eq=False)
class ModeStatistics:
    """
    Stationary second moments of the mode coordinates against the
    per-mode Ornstein-Uhlenbeck values beta / (2 (lambda_k + alpha)).
    """
    beta: float
    alpha: float
    variances: np.ndarray
    expected: np.ndarray
    trace: float
    truncated_trace: float
    series_trace: float
    max_cross_correlation: float
    correlation_bound: float
    ess: float

    @property
    def n_modes(self):
        return self.variances.size

    @property
    def relative_errors(self):
        return np.abs(self.variances / self.expected - 1.0)

    def max_relative_error(self, modes=None):
        errors = self.relative_errors
        return float(np.max(errors if modes is None else errors[: int(modes)]))

    @property
    def trace_error(self):
        """Relative gap between the empirical trace and the full series."""
        return abs(self.trace / self.series_trace - 1.0)

    @property
    def decoupled(self):
        return self.max_cross_correlation <= self.correlation_bound


@dataclass(frozen=True, eq=False)
class PartitionEstimate:
    """Monte Carlo log Z_U over the Gaussian reference measure."""
    log_z: float
    partial_log_means: np.ndarray
    checkpoints: np.ndarray
    weight_ess_fraction: float
    n_samples: int
    seed: int
    divergent: bool = False

    @property
    def value(self):
        return float(np.exp(self.log_z))


@dataclass(frozen=True)
class ReactionConditionReport:
    """
    Sampled constants of the reaction conditions
        (U'(u) - U'(v))(u - v) <= (K1 + lambda_1)|u - v|^2
        U'(u) u <= K2 - (K3 - lambda_1)|u|^2,  K3 > lambda_1
        |U'(u)| <= K4 + K5 |u|^q
    on an interval.
    """
    reaction_name: str
    box: tuple
    n_samples: int
    seed: int
    first_eigenvalue: float
    monotone_constant: float
    coercive_constants: tuple
    growth_constants: tuple
    growth_exponent: float
    violations: tuple = ()
    label: str = 'sampled, not proven'

    @property
    def verdict(self):
        return Verdict.FAIL if self.violations else Verdict.PASS

    @property
    def failed_conditions(self):
        return sorted({v.condition for v in self.violations})


@dataclass(frozen=True, eq=False)
class LogRatioSection:
    """
    Gibbs log-ratio on a grid over K <= 3 active modes, the remaining
    modes frozen at zero. values has one axis per active mode.
    """
    modes: tuple
    axes: tuple
    values: np.ndarray
    beta: float
    n_modes: int
    reaction_name: str

    @property
    def shape(self):
        return self.values.shape

    @property
    def steps(self):
        return tuple(float(a[1] - a[0]) for a in self.axes)

    def states(self):
        return section_states(self.modes, self.axes, self.n_modes)


def section_states(modes, axes, n_modes):
    """Full coefficient arrays of every section node, shape (*shape, N)."""
    mesh = np.meshgrid(*axes, indexing='ij')
    coeffs = np.zeros(mesh[0].shape + (n_modes,))
    for axis, k in enumerate(modes):
        coeffs[..., k - 1] = mesh[axis]
    return coeffs
