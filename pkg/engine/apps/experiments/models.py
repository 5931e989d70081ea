"""
Run bookkeeping: options, checks, output digests and the run manifest.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

from django.db import models
from django.utils.translation import gettext_lazy as _


class ExperimentName(models.TextChoices):
    SIMULATE = 'simulate', _('Equilibrium sampling')
    DENSITY = 'density', _('Density grids and Fokker-Planck residuals')
    INVERT = 'invert', _('Coefficient inversion')
    COUNTEREXAMPLE = 'counterexample', _('Non-identifiability families')
    SPDE = 'spde', _('Galerkin reaction-diffusion')
    ACCEPTANCE = 'acceptance', _('Acceptance suite')


class CheckStatus(models.TextChoices):
    PASS = 'pass', _('Pass')
    FAIL = 'fail', _('Fail')
    ADVISORY = 'advisory', _('Failed, advisory only')


class Comparison(models.TextChoices):
    AT_MOST = '<=', _('At most')
    AT_LEAST = '>=', _('At least')


@dataclass(frozen=True)
class RunOptions:
    seed: int
    quick: bool = False
    quick_factor: float = 0.1


@dataclass(frozen=True)
class Check:
    """
    One declared comparison of a run. Non-binding checks never fail a
    run; they show up as advisories.
    """
    name: str
    value: Optional[float]
    threshold: Optional[float]
    comparison: str = Comparison.AT_MOST
    binding: bool = True
    detail: str = ''
    criterion: str = ''

    @classmethod
    def at_most(cls, name, value, threshold, **kwargs):
        return cls(name=name, value=float(value), threshold=float(threshold), **kwargs)

    @classmethod
    def at_least(cls, name, value, threshold, **kwargs):
        return cls(name=name, value=float(value), threshold=float(threshold), comparison=Comparison.AT_LEAST, **kwargs)

    @classmethod
    def from_error(cls, name, exc, **kwargs):
        """A check that could not be evaluated because an engine error was raised."""
        return cls(name=name, value=None, threshold=None, detail=f'{exc.__class__.__name__}: {exc}', **kwargs)

    @property
    def passed(self):
        if self.value is None or self.threshold is None or not math.isfinite(self.value):
            return False
        if self.comparison == Comparison.AT_LEAST:
            return self.value >= self.threshold
        return self.value <= self.threshold

    @property
    def status(self):
        if self.passed:
            return CheckStatus.PASS
        return CheckStatus.FAIL if self.binding else CheckStatus.ADVISORY

    def advisory(self):
        """Same check, non-binding."""
        return Check(
            name=self.name,
            value=self.value,
            threshold=self.threshold,
            comparison=self.comparison,
            binding=False,
            detail=self.detail,
            criterion=self.criterion,
        )

    @property
    def label(self):
        return f'{self.criterion}.{self.name}' if self.criterion else self.name


@dataclass(frozen=True)
class OutputFile:
    name: str
    sha256: str
    size: int


@dataclass(frozen=True)
class Advisory:
    """A warning raised during the run."""
    category: str
    message: str


@dataclass(frozen=True, eq=False)
class RunManifest:
    """
    Machine-readable record of a finished run. Output files are listed with
    content digests; the manifest itself is not among them.
    """
    command: str
    run_id: str
    config_hash: str
    seed: int
    quick: bool
    started_at: str
    wall_time: float
    versions: dict
    outputs: tuple = ()
    checks: tuple = ()
    advisories: tuple = ()
    config: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(check.status != CheckStatus.FAIL for check in self.checks)

    @property
    def failed_checks(self):
        return [check.label for check in self.checks if check.status == CheckStatus.FAIL]

    @property
    def summary(self):
        counts = {status: 0 for status in CheckStatus.values}
        for check in self.checks:
            counts[check.status] += 1
        return counts
