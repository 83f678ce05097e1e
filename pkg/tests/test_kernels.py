import os
import subprocess
import sys

import numpy as np
import pytest

from tckae import _kernels


def _inputs(seed=0, N=37, G=4, D=11):
    rng = np.random.default_rng(seed)
    m = (rng.random((N, D)) > 0.4).astype(np.float64)
    x = rng.normal(size=(N, D)) * m
    mu = rng.normal(size=(G, D))
    var = rng.uniform(0.1, 3.0, size=(G, D))
    r = rng.dirichlet(np.ones(G), size=N)
    return x, m, mu, var, r


def test_numpy_loglik_matches_loop():
    x, m, mu, var, _ = _inputs(N=5, G=2, D=3)
    ll = _kernels.masked_loglik_numpy(x, m, mu, var)
    for i in range(5):
        for g in range(2):
            ref = sum(-0.5 * (np.log(2 * np.pi * var[g, d]) + (x[i, d] - mu[g, d]) ** 2 / var[g, d])
                      for d in range(3) if m[i, d])
            assert ll[i, g] == pytest.approx(ref, abs=1e-12)


def test_numpy_sq_dev_matches_loop():
    x, m, mu, _, r = _inputs(N=5, G=2, D=3)
    S = _kernels.weighted_sq_dev_numpy(r, x, m, mu)
    for g in range(2):
        for d in range(3):
            ref = sum(r[i, g] * m[i, d] * (x[i, d] - mu[g, d]) ** 2 for i in range(5))
            assert S[g, d] == pytest.approx(ref, abs=1e-12)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("seed", range(3))
def test_backends_agree(seed):
    x, m, mu, var, r = _inputs(seed)
    np.testing.assert_allclose(_kernels.masked_loglik_numba(x, m, mu, var),
                               _kernels.masked_loglik_numpy(x, m, mu, var), rtol=1e-12, atol=1e-10)
    np.testing.assert_allclose(_kernels.weighted_sq_dev_numba(r, x, m, mu),
                               _kernels.weighted_sq_dev_numpy(r, x, m, mu), rtol=1e-12, atol=1e-10)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("true", "numpy"), ("", None)])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, TCKAE_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from tckae import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    if expected is None:
        expected = "numba" if _kernels.HAVE_NUMBA else "numpy"
    assert out == expected
