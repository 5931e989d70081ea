"""
Tensor-product quadrature on uniform grids.
Composite Simpson per axis; node counts are odd so the rule is exact for cubics.
"""

import numpy as np
from scipy.integrate import cumulative_simpson, simpson


def axis_nodes(lower, upper, shape):
    return tuple(np.linspace(lo, hi, n) for lo, hi, n in zip(lower, upper, shape))


def spacing(lower, upper, shape):
    return np.array([(hi - lo) / (n - 1) for lo, hi, n in zip(lower, upper, shape)])


def integrate(values, steps):
    """Integral of a d-dimensional array over the whole grid."""
    result = np.asarray(values, dtype=float)
    for h in reversed(steps):
        result = simpson(result, dx=h, axis=-1)
    return float(result)


def marginal(values, steps, axis):
    """Integrate out every axis except `axis`; returns a 1D profile."""
    result = np.asarray(values, dtype=float)
    for i in reversed(range(result.ndim)):
        if i != axis:
            result = simpson(result, dx=steps[i], axis=i)
    return result


def cumulative(profile, nodes):
    return cumulative_simpson(profile, x=nodes, initial=0.0)
