"""
Utility functions for axis-aligned boxes.
Used for density grids, condition sampling and simulation windows.
"""

import numpy as np

from core.utils.exceptions import ConfigError


def validate_box(lower, upper):
    """
    Validate box bounds.

    Args:
        lower: sequence of lower bounds, one per axis
        upper: sequence of upper bounds, one per axis

    Returns:
        tuple: (is_valid, error_message)

    Example:
        >>> validate_box([-1.0], [1.0])
        (True, None)
        >>> validate_box([1.0], [1.0])
        (False, 'Degenerate axis 0: lower=1.0 must be below upper=1.0')
    """
    try:
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
    except (ValueError, TypeError):
        return False, 'Box bounds must be numeric'

    if lower.ndim != 1 or lower.shape != upper.shape:
        return False, f'Bounds must be flat and of equal length, got {lower.shape} and {upper.shape}'

    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        return False, 'Box bounds must be finite'

    for axis, (lo, hi) in enumerate(zip(lower, upper)):
        if not lo < hi:
            return False, f'Degenerate axis {axis}: lower={lo} must be below upper={hi}'

    return True, None


def as_box(lower, upper):
    """
    Normalize bounds into a pair of float arrays.
    Raises ConfigError when the box is invalid.
    """
    is_valid, error = validate_box(lower, upper)
    if not is_valid:
        raise ConfigError(error)
    return (
        np.atleast_1d(np.asarray(lower, dtype=float)),
        np.atleast_1d(np.asarray(upper, dtype=float)),
    )


def symmetric_box(half_width, dimension=1):
    """
    Box [-w, w]^d.

    Example:
        >>> symmetric_box(8.0, 2)
        (array([-8., -8.]), array([8., 8.]))
    """
    half_width = float(half_width)
    return as_box([-half_width] * dimension, [half_width] * dimension)


def widen_box(lower, upper, factor=2.0):
    """
    Scale a box about its center.
    Used to suggest a wider domain when truncation loses mass.
    """
    lower, upper = as_box(lower, upper)
    center = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower) * factor
    return center - half, center + half


def box_volume(lower, upper):
    """Lebesgue volume of the box."""
    lower, upper = as_box(lower, upper)
    return float(np.prod(upper - lower))
