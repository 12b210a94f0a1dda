"""Central-difference gradient oracle.

Used by the test suite and the CLI selftest to check analytic gradients
against an independent numeric path. Keep this module free of any autodiff
imports so the oracle cannot share code with what it verifies.
"""

from __future__ import annotations

import numpy as np

DEFAULT_STEP = 1e-5


def finite_difference_grad(f, x, step=DEFAULT_STEP, coords=None):
    """Gradient of scalar f at x via (f(x+h) - f(x-h)) / 2h per coordinate.

    f takes a float64 array shaped like x and returns a float. When coords is
    given (list of flat indices), only those entries are evaluated and the
    rest stay zero; use it to spot-check large tensors cheaply.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """Elementwise |a - n| / (|n| + floor), maximized."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + floor)))
