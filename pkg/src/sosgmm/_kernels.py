"""Compiled inner loops for high-degree Chebyshev evaluation."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def clenshaw(coef, u):
    """Evaluate sum_j coef[j] T_j(u) at every entry of ``u``.

    The loop runs over coefficients on the outside so that the inner loop
    over points vectorizes.
    """
    m = u.shape[0]
    b1 = np.zeros(m)
    b2 = np.zeros(m)
    two_u = 2.0 * u
    for j in range(coef.shape[0] - 1, 0, -1):
        c = coef[j]
        for i in range(m):
            b0 = c + two_u[i] * b1[i] - b2[i]
            b2[i] = b1[i]
            b1[i] = b0
    out = np.empty(m)
    for i in range(m):
        out[i] = coef[0] + u[i] * b1[i] - b2[i]
    return out


@njit(cache=True)
def clenshaw_log(coef, u):
    """Sign and log-magnitude of a Chebyshev series, safe against overflow.

    The recurrence state is rescaled whenever it exceeds 1e100, so values
    far outside [-1, 1] (where the series grows exponentially with the
    degree) can still be compared in log space.
    """
    m = u.shape[0]
    sign = np.empty(m)
    logabs = np.empty(m)
    for i in range(m):
        x = u[i]
        b1 = 0.0
        b2 = 0.0
        logscale = 0.0
        scale = 1.0
        for j in range(coef.shape[0] - 1, 0, -1):
            b0 = coef[j] * scale + 2.0 * x * b1 - b2
            b2 = b1
            b1 = b0
            a = abs(b1)
            if a > 1e100:
                b1 *= 1e-100
                b2 *= 1e-100
                scale *= 1e-100
                logscale += 230.25850929940458
        val = coef[0] * scale + x * b1 - b2
        if val == 0.0:
            sign[i] = 0.0
            logabs[i] = -np.inf
        else:
            sign[i] = 1.0 if val > 0 else -1.0
            logabs[i] = np.log(abs(val)) + logscale
    return sign, logabs
