"""
Test factories for Galerkin run configs.
"""

import factory

from .models import SpdeConfig, TimeScheme
from .presets import linear


class SpdeConfigFactory(factory.Factory):
    class Meta:
        model = SpdeConfig

    reaction = factory.LazyFunction(linear)
    n_modes = 8
    dt = 1e-3
    n_steps = 20_000
    n_chains = 64
    burn_in_fraction = 0.5
    thinning = 10
    seed = factory.Sequence(lambda n: 2000 + n)
    beta = 2.0
    scheme = TimeScheme.EXPONENTIAL

    class Params:
        quick = factory.Trait(n_steps=2_000, n_chains=4)
