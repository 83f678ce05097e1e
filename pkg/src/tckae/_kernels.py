"""
Hot loops of the mixture fits.

Each kernel exists twice: a numba ``@njit`` loop and a pure-numpy version.
The numba path is used when numba imports and ``TCKAE_DISABLE_NUMBA`` is not
set to a truthy value; the flag is read once at import time. Both paths take
masked values with unobserved cells already zeroed, and they agree to
floating-point roundoff (not bitwise).
"""

import math
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_LOG_2PI = math.log(2.0 * math.pi)


def _env_disabled():
    return os.environ.get("TCKAE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def masked_loglik_numpy(x, m, mu, var):
    """ll[i, g] = sum_d m[i,d] * log N(x[i,d] | mu[g,d], var[g,d]).

    x, m: (N, D) with x zero where m is 0; mu, var: (G, D).
    """
    m = m.astype(np.float64)
    diff = x[:, None, :] - mu[None, :, :]
    term = np.log(var)[None, :, :] + diff * diff / var[None, :, :] + _LOG_2PI
    return -0.5 * np.einsum("nd,ngd->ng", m, term)


def weighted_sq_dev_numpy(r, x, m, mu):
    """S[g, d] = sum_i r[i,g] * m[i,d] * (x[i,d] - mu[g,d])**2."""
    m = m.astype(np.float64)
    diff = x[:, None, :] - mu[None, :, :]
    return np.einsum("ng,nd,ngd->gd", r, m, diff * diff)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def masked_loglik_numba(x, m, mu, var):
        n, d = x.shape
        g = mu.shape[0]
        log_var = np.log(var)
        out = np.zeros((n, g))
        for i in range(n):
            for k in range(g):
                acc = 0.0
                for j in range(d):
                    if m[i, j]:
                        diff = x[i, j] - mu[k, j]
                        acc += log_var[k, j] + diff * diff / var[k, j] + _LOG_2PI
                out[i, k] = -0.5 * acc
        return out

    @njit(cache=True)
    def weighted_sq_dev_numba(r, x, m, mu):
        n, d = x.shape
        g = mu.shape[0]
        out = np.zeros((g, d))
        for i in range(n):
            for j in range(d):
                if m[i, j]:
                    xv = x[i, j]
                    for k in range(g):
                        diff = xv - mu[k, j]
                        out[k, j] += r[i, k] * diff * diff
        return out

else:  # pragma: no cover
    masked_loglik_numba = None
    weighted_sq_dev_numba = None


def _pick(numba_fn, numpy_fn):
    return numba_fn if USE_NUMBA else numpy_fn


masked_loglik = _pick(masked_loglik_numba, masked_loglik_numpy)
weighted_sq_dev = _pick(weighted_sq_dev_numba, weighted_sq_dev_numpy)
