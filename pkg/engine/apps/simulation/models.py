"""
Simulation configuration, empirical measures and distance reports.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from django.db import models
from scipy import stats
from django.utils.translation import gettext_lazy as _

from core.utils.exceptions import ConfigError, InsufficientSupportError


class InitialState(models.TextChoices):
    ORIGIN = 'origin', _('Origin')
    NORMAL = 'normal', _('Standard normal draw per chain')


class ReferenceKind(models.TextChoices):
    SAMPLES = 'samples', _('Empirical measure')
    GRID = 'grid', _('Density grid')
    CDF = 'cdf', _('Distribution function')


@dataclass(frozen=True)
class SimConfig:
    """
    Euler-Maruyama run parameters. x0 is a point or an InitialState rule.
    """
    dt: float
    n_steps: int
    n_chains: int = 1
    burn_in_fraction: float = 0.5
    thinning: int = 1
    seed: int = 0
    x0: Union[str, tuple] = InitialState.ORIGIN

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f'dt must be positive, got {self.dt}', section='simulation', key='dt')
        if self.n_steps < 1:
            raise ConfigError('n_steps must be at least 1', section='simulation', key='n_steps')
        if self.n_chains < 1:
            raise ConfigError('n_chains must be at least 1', section='simulation', key='n_chains')
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigError('burn_in_fraction must lie in [0, 1)', section='simulation', key='burn_in_fraction')
        if self.thinning < 1:
            raise ConfigError('thinning must be at least 1', section='simulation', key='thinning')
        if isinstance(self.x0, str):
            if self.x0 not in InitialState.values:
                raise ConfigError(f'Unknown initial state rule {self.x0!r}', section='simulation', key='x0')
        else:
            object.__setattr__(self, 'x0', tuple(float(v) for v in np.atleast_1d(self.x0)))

    @property
    def burn_in_steps(self):
        return int(self.burn_in_fraction * self.n_steps)

    @property
    def recorded_per_chain(self):
        return (self.n_steps - self.burn_in_steps) // self.thinning

    def initial_states(self, dimension, noise):
        count = len(noise.chains)
        if self.x0 == InitialState.ORIGIN:
            return np.zeros((count, dimension))
        if self.x0 == InitialState.NORMAL:
            return noise.initial(dimension)
        point = np.asarray(self.x0, dtype=float)
        if point.shape != (dimension,):
            raise ConfigError(f'x0 has {point.size} coordinates, pair has dimension {dimension}',
                              section='simulation', key='x0')
        return np.tile(point, (count, 1))

    def scaled(self, factor):
        """Same run with n_steps scaled (used by quick runs)."""
        return SimConfig(
            dt=self.dt,
            n_steps=max(1, int(self.n_steps * factor)),
            n_chains=self.n_chains,
            burn_in_fraction=self.burn_in_fraction,
            thinning=self.thinning,
            seed=self.seed,
            x0=self.x0,
        )


@dataclass(frozen=True)
class Trajectory:
    """Recorded states of shape (n_records, n_chains, d) at `steps`."""
    steps: np.ndarray
    states: np.ndarray
    dt: float
    seed: int
    stability_advisory: float

    @property
    def times(self):
        return self.steps * self.dt


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """
    Pooled post-burn-in samples ordered by chain id. Every chain
    contributes the same number of samples.
    """
    samples: np.ndarray
    chain_ids: np.ndarray
    steps: np.ndarray
    seed: Optional[int] = None
    ess_per_axis: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples.reshape(-1, 1)
        if not np.all(np.isfinite(samples)):
            raise InsufficientSupportError('Empirical measures hold finite samples only')
        chain_ids = np.asarray(self.chain_ids, dtype=np.int64)
        counts = np.bincount(chain_ids - chain_ids.min()) if chain_ids.size else np.array([0])
        if np.any(counts[counts > 0] != counts.max()):
            raise InsufficientSupportError('Chains must contribute equal sample counts')
        for name, arr in (('samples', samples), ('chain_ids', chain_ids), ('steps', np.asarray(self.steps))):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.ess_per_axis is None:
            object.__setattr__(self, 'ess_per_axis', effective_sample_size(self.by_chain()))

    @classmethod
    def from_samples(cls, samples, seed=None, **metadata):
        """Wrap independent draws as a single-chain measure."""
        samples = np.asarray(samples, dtype=float)
        n = samples.shape[0]
        return cls(
            samples=samples,
            chain_ids=np.zeros(n, dtype=np.int64),
            steps=np.arange(n),
            seed=seed,
            ess_per_axis=np.full(1 if samples.ndim == 1 else samples.shape[1], float(n)),
            metadata=metadata,
        )

    @property
    def dimension(self):
        return self.samples.shape[1]

    @property
    def size(self):
        return self.samples.shape[0]

    @property
    def chains(self):
        return np.unique(self.chain_ids)

    @property
    def n_chains(self):
        return self.chains.size

    @property
    def ess(self):
        return float(np.min(self.ess_per_axis))

    def by_chain(self):
        """Samples reshaped to (n_chains, per_chain, d)."""
        n_chains = np.unique(self.chain_ids).size
        return self.samples.reshape(n_chains, -1, self.samples.shape[1])

    def marginal(self, axis=0):
        return self.samples[:, axis]

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class DistanceReport:
    """
    ks is the maximum over per-axis and projected statistics for d > 1;
    wasserstein1 is reported in one dimension only.
    """
    ks: float
    wasserstein1: Optional[float]
    n1: int
    n2: Optional[int]
    ess1: float
    ess2: Optional[float]
    threshold: float
    reference: str
    ks_per_axis: tuple = ()
    ks_projections: tuple = ()

    @property
    def indistinguishable(self):
        return self.ks < self.threshold


@dataclass(frozen=True)
class Average:
    value: float
    standard_error: float
    count: int


def asymptotic_variance(series):
    """Batch-means estimate of the asymptotic variance per axis; series (L, d)."""
    series = np.asarray(series, dtype=float)
    length = series.shape[0]
    n_batches = max(2, int(np.sqrt(length)))
    size = length // n_batches
    if size < 1:
        return np.var(series, axis=0)
    batches = series[: n_batches * size].reshape(n_batches, size, -1).mean(axis=1)
    return size * np.var(batches, axis=0, ddof=1)


def rank_normalize(chains):
    """Normal scores of the pooled ranks per axis."""
    chains = np.asarray(chains, dtype=float)
    n_chains, length, d = chains.shape
    pooled = chains.reshape(-1, d)
    ranks = stats.rankdata(pooled, axis=0)
    scores = stats.norm.ppf((ranks - 0.375) / (pooled.shape[0] + 0.25))
    return scores.reshape(n_chains, length, d)


def effective_sample_size(chains):
    """
    Pooled ESS per axis from per-chain batch means of rank-normalized
    samples; chains (C, L, d).
    """
    chains = rank_normalize(chains)
    total = np.zeros(chains.shape[2])
    for series in chains:
        length = series.shape[0]
        if length < 4:
            total += length
            continue
        variance = np.var(series, axis=0)
        asym = asymptotic_variance(series)
        ratio = np.where(asym > 0, variance / np.where(asym > 0, asym, 1.0), 1.0)
        total += length * np.minimum(ratio, 1.0)
    return total
