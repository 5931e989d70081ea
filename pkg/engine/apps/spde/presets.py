"""
Reaction potentials U(u) for the Galerkin system.
Extra reactions can be registered with @register_reaction.
"""

import inspect

import numpy as np
import sympy as sp

from apps.coefficients.fields import parse_expression
from core.utils.exceptions import ConfigError

from .models import Reaction

U = sp.Symbol('u', real=True)

REACTIONS = {}


def register_reaction(name):
    def decorator(builder):
        if name in REACTIONS:
            raise ValueError(f'Reaction {name!r} already registered')
        REACTIONS[name] = builder
        return builder
    return decorator


def _elementwise(expr):
    fn = sp.lambdify(U, expr, modules='numpy')

    def evaluate(u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(np.asarray(fn(u), dtype=float), u.shape).copy()

    return evaluate


def _bounded_above(expr):
    try:
        limits = [sp.limit(expr, U, side) for side in (sp.oo, -sp.oo)]
    except (NotImplementedError, ValueError):
        return False
    return all(lim.is_finite or lim == -sp.oo for lim in limits)


def reaction_from_expression(potential, name='custom', linear_rate=None):
    """
    Reaction from a sympy expression (or string) in the variable u.

    Example:
        >>> reaction_from_expression('-u**2/2').derivative(2.0)
        array(-2.)
    """
    expr = parse_expression(potential, (U,))
    first = sp.diff(expr, U)
    return Reaction(
        name=name,
        potential=_elementwise(expr),
        derivative=_elementwise(first),
        curvature=_elementwise(sp.diff(first, U)),
        linear_rate=linear_rate,
        bounded_above=_bounded_above(expr),
        metadata={'expression': expr, 'derivative': first},
    )


def reaction(name, **params):
    try:
        builder = REACTIONS[name]
    except KeyError:
        raise ConfigError(f'Unknown reaction {name!r}; known: {sorted(REACTIONS)}', section='spde', key='reaction')
    unknown = sorted(set(params) - set(inspect.signature(builder).parameters))
    if unknown:
        raise ConfigError(f'Reaction {name!r} does not take {unknown}', section='spde', key=unknown[0])
    return builder(**params)


@register_reaction('linear')
def linear(alpha=1.0):
    """U = -alpha u^2 / 2: every mode is an Ornstein-Uhlenbeck process."""
    alpha = float(alpha)
    return reaction_from_expression(-sp.Float(alpha) * U ** 2 / 2, name='linear', linear_rate=alpha)


@register_reaction('free')
def free():
    """U = 0: the stochastic heat equation."""
    return reaction_from_expression(sp.Integer(0), name='free', linear_rate=0.0)


@register_reaction('allen_cahn')
def allen_cahn():
    return reaction_from_expression(U ** 2 / 2 - U ** 4 / 4, name='allen_cahn')
