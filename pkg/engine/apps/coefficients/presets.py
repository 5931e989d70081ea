"""
Named coefficient pairs used by experiments and tests.
Extra pairs can be registered with @register_preset.
"""

import inspect

from core.utils.exceptions import ConfigError

from .models import CoefficientKind
from .services import CoefficientService

PRESETS = {}


def register_preset(name):
    def decorator(builder):
        if name in PRESETS:
            raise ValueError(f'Preset {name!r} already registered')
        PRESETS[name] = builder
        return builder
    return decorator


def preset(name, **params):
    """
    Build a registered pair.

    Example:
        >>> preset('ou', alpha=1.0, beta=2.0).kind == 'langevin'
        True
    """
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ConfigError(f'Unknown coefficient preset {name!r}; known: {sorted(PRESETS)}', key='preset')
    accepted = inspect.signature(builder).parameters
    unknown = sorted(set(params) - set(accepted))
    if unknown:
        raise ConfigError(f'Preset {name!r} does not take {unknown}', key=unknown[0])
    return builder(**params)


@register_preset('ou')
def ornstein_uhlenbeck(alpha=1.0, beta=2.0):
    return CoefficientService.pair_from_expressions(
        potential=f'-{float(alpha)!r} * x**2 / 2', beta=beta, name='ou',
    )


@register_preset('gaussian')
def gaussian(alpha=1.0, beta=2.0, dimension=2):
    square = ' + '.join(f'x{i}**2' for i in range(1, dimension + 1)) if dimension > 1 else 'x**2'
    return CoefficientService.pair_from_expressions(
        potential=f'-{float(alpha)!r} * ({square}) / 2', beta=beta, dimension=dimension, name='gaussian',
    )


@register_preset('cauchy_drift')
def cauchy_drift():
    """b = -2x/(1+x^2), sigma = sqrt(2): invariant law is standard Cauchy."""
    return CoefficientService.pair_from_expressions(
        potential='-log(1 + x**2)', beta=2.0, name='cauchy_drift', heavy_tailed=True,
    )


@register_preset('cauchy_gauge')
def cauchy_gauge():
    """Same drift as cauchy_drift with D = 2 + x^2; shares the standard Cauchy invariant law."""
    return CoefficientService.pair_from_expressions(
        drift='-2*x / (1 + x**2)', sigma='sqrt(2*(2 + x**2))', name='cauchy_gauge', heavy_tailed=True,
    )


@register_preset('double_well')
def double_well(beta=2.0):
    return CoefficientService.pair_from_expressions(
        potential='x**2/2 - x**4/4', beta=beta, name='double_well',
    )


@register_preset('quartic')
def quartic(beta=2.0):
    return CoefficientService.pair_from_expressions(potential='-x**4/4', beta=beta, name='quartic')


@register_preset('sign_flipped')
def sign_flipped():
    """b = +x: transient, no invariant probability measure."""
    return CoefficientService.pair_from_expressions(
        drift='x', sigma='sqrt(2)', kind=CoefficientKind.ADDITIVE, name='sign_flipped',
    )
