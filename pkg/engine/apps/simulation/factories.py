"""
Test factories for simulation configs.
"""

import factory

from .models import InitialState, SimConfig


class SimConfigFactory(factory.Factory):
    class Meta:
        model = SimConfig

    dt = 1e-2
    n_steps = 20_000
    n_chains = 8
    burn_in_fraction = 0.5
    thinning = 1
    seed = factory.Sequence(lambda n: 1000 + n)
    x0 = InitialState.ORIGIN

    class Params:
        quick = factory.Trait(n_steps=4_000, n_chains=4)
