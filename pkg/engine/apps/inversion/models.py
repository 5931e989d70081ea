"""
Inversion reports, gauge families and non-identifiability verdicts.
"""

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from django.db import models
from django.utils.translation import gettext_lazy as _


class InversionTarget(models.TextChoices):
    DRIFT_1D = 'drift_1d', _('Drift from a 1D density')
    DRIFT_LANGEVIN = 'drift_langevin', _('Gradient drift from a Gibbs density')
    BETA_ADDITIVE = 'beta_additive', _('Noise intensity, additive noise')
    BETA_LANGEVIN = 'beta_langevin', _('Noise intensity, gradient drift')
    BETA_RATIO = 'beta_ratio', _('Ratio of noise intensities')
    DRIFT_SPDE = 'drift_spde', _('Reaction term from an SPDE measure')
    BETA_SPDE = 'beta_spde', _('Noise intensity from an SPDE measure')


class Aggregation(models.TextChoices):
    MEDIAN = 'median', _('Median')
    TRIMMED_MEAN = 'trimmed_mean', _('Trimmed mean')


class Verdict(models.TextChoices):
    INDISTINGUISHABLE = 'indistinguishable', _('Indistinguishable')
    DISTINGUISHABLE = 'distinguishable', _('Distinguishable')


@dataclass(frozen=True, eq=False)
class InversionReport:
    """
    Recovered coefficient with its diagnostics.

    For scalar targets `recovered` is the declared aggregation of
    `pointwise_estimates`; for field targets it is a masked array on the
    grid of `grid` and `pointwise_estimates` holds its unmasked values.
    """
    target: str
    recovered: Any
    pointwise_estimates: np.ndarray
    dispersion: float
    masked_fraction: float
    formula: str
    aggregation: Optional[str] = None
    admissible_nodes: int = 0
    thresholds: dict = field(default_factory=dict)
    per_axis: tuple = ()
    statistical: bool = False
    bootstrap_dispersion: Optional[float] = None
    grid: Any = None

    @property
    def is_scalar(self):
        return np.ndim(self.recovered) == 0

    @property
    def value(self):
        if not self.is_scalar:
            raise TypeError(f'{self.target} recovers a field, not a scalar')
        return float(self.recovered)

    def error_against(self, exact):
        """Max abs error of a field target against exact values on unmasked nodes."""
        diff = np.ma.abs(self.recovered - np.asarray(exact))
        return float(diff.max()) if diff.count() else 0.0


@dataclass(frozen=True, eq=False)
class GaugeFamily:
    """
    Diffusions D1 = D2 (1 + C e^{-U2}) sharing the invariant density of
    (b, D2), U2 the primitive of b / D2 anchored at x0.
    """
    base: Any
    derived: Any
    anchor: float
    offset: float
    constant: float
    box: tuple
    certificate: float
    symbolic: bool
    derived_expression: Any = None
    advisories: tuple = ()

    def base_diffusion(self, x):
        return self.base.diffusion_1d(x)

    def derived_diffusion(self, x):
        return self.derived.diffusion_1d(x)

    @property
    def flags(self):
        return sorted({c for report in self.advisories for c in report.failed_conditions})


@dataclass(frozen=True, eq=False)
class NonidentifiabilityReport:
    pair_names: tuple
    distance: Any
    verdict: str
    reference_distances: dict = field(default_factory=dict)
    advisories: tuple = ()
    measures: tuple = ()

    @property
    def indistinguishable(self):
        return self.verdict == Verdict.INDISTINGUISHABLE

    @property
    def diagnostics(self):
        """Failed sampled conditions per pair name; pairs that pass are omitted."""
        return {
            report.pair_name: list(report.failed_conditions)
            for report in self.advisories if not report.passed
        }


@dataclass(frozen=True)
class PerturbationResult:
    noise_levels: tuple
    errors: tuple
    baseline: Any
    seed: int

    @property
    def amplification(self):
        """Error per unit noise level, one entry per nonzero level."""
        return tuple(e / level for level, e in zip(self.noise_levels, self.errors) if level > 0)
