"""Compare the numba and numpy backends of the mixture-fit kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Kernel timings call both implementations in one process. The member-fit
timing runs a fresh interpreter per backend, with TCKAE_DISABLE_NUMBA set for
the numpy run, so it measures what a user gets from the flag.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tckae import _kernels

FIT_SNIPPET = """
import time
from tckae import _kernels
from tckae.mts import standardize
from tckae.synth import SynthConfig, generate
from tckae.tck import TckConfig, fit_tck
ds = generate(SynthConfig(n=200, missing_rate=0.5, seed=1))
ds, _ = standardize(ds, ds)
cfg = TckConfig(max_components=10, realizations=2, master_seed=0)
fit_tck(ds, TckConfig(max_components=3, realizations=1))  # warm up / compile
t0 = time.perf_counter()
fit_tck(ds, cfg)
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def em_sized_inputs(n=160, g=10, d=200, seed=0):
    rng = np.random.default_rng(seed)
    m = (rng.random((n, d)) > 0.5).astype(np.float64)
    x = rng.normal(size=(n, d)) * m
    mu = rng.normal(size=(g, d))
    var = rng.uniform(0.2, 2.0, size=(g, d))
    r = rng.dirichlet(np.ones(g), size=n)
    return x, m, mu, var, r


def time_call(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def kernel_timings(repeat):
    x, m, mu, var, r = em_sized_inputs()
    pairs = {
        "masked_loglik": ((_kernels.masked_loglik_numpy, getattr(_kernels, "masked_loglik_numba", None)),
                          (x, m, mu, var)),
        "weighted_sq_dev": ((_kernels.weighted_sq_dev_numpy, getattr(_kernels, "weighted_sq_dev_numba", None)),
                            (r, x, m, mu)),
    }
    out = {}
    for name, ((np_fn, nb_fn), args) in pairs.items():
        row = {"numpy_s": time_call(np_fn, args, repeat)}
        if nb_fn is not None:
            row["numba_s"] = time_call(nb_fn, args, repeat)
            row["speedup"] = row["numpy_s"] / row["numba_s"]
        out[name] = row
    return out


def fit_timings():
    out = {}
    for flag in ("", "1"):
        env = dict(os.environ, TCKAE_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-fit", action="store_true", help="only time the kernels")
    args = ap.parse_args()

    results = {"have_numba": _kernels.HAVE_NUMBA, "kernels": kernel_timings(args.repeat)}
    if not args.skip_fit:
        results["member_fit_18_members_s"] = fit_timings()

    for name, row in results["kernels"].items():
        line = f"{name:16s} numpy {row['numpy_s'] * 1e3:8.3f} ms"
        if "numba_s" in row:
            line += f"   numba {row['numba_s'] * 1e3:8.3f} ms   x{row['speedup']:.1f}"
        print(line)
    for backend, secs in results.get("member_fit_18_members_s", {}).items():
        print(f"fit (18 members) {backend:6s} {secs:.2f} s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
