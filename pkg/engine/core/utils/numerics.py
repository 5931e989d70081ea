"""
Access to the NUMERICS settings dict.
Falls back to built-in defaults when Django settings are not configured,
so the numerical services stay usable as a plain library.
"""

from django.conf import settings

DEFAULTS = {
    'TOL_FD': 1e-6,
    'FD_STEP': 1e-5,
    'STRICT_SLACK': 1e-12,
    'TAIL_TOL': 1e-6,
    'P_FLOOR_RELATIVE': 1e-12,
    'MIN_NODES_PER_AXIS': 9,
    'WEAK_FORM_BUMPS': 8,
    'EPS_LAP': 1e-6,
    'EPS_GRAD': 1e-6,
    'MIN_ADMISSIBLE_NODES': 100,
    'MASKED_FRACTION_LIMIT': 0.5,
    'BOOTSTRAP_RESAMPLES': 16,
    'BLOWUP_RADIUS': 1e8,
    'BURN_IN_FRACTION': 0.5,
    'NOISE_BLOCK_STEPS': 1024,
    'KS_PROJECTIONS': 8,
    'KS_PROJECTION_SEED': 7,
    'MIN_DENSITY_SAMPLES': 1000,
    'MIXING_STANDARD_ERRORS': 5.0,
    'STABILITY_ADVISORY': 0.5,
    'SPDE_MIN_ESS': 1e4,
}


def numerics_setting(name):
    """
    Look up a numerical constant.

    Example:
        >>> numerics_setting('TAIL_TOL')
        1e-06
    """
    if name not in DEFAULTS:
        raise KeyError(f'Unknown numerics setting: {name}')
    if settings.configured:
        overrides = getattr(settings, 'NUMERICS', {}) or {}
        return overrides.get(name, DEFAULTS[name])
    return DEFAULTS[name]
