"""Timing comparison of the jitted kernels against the numpy fallback.

The dispatch happens at import time, so each variant runs in its own
interpreter: the parent invokes this file twice as a subprocess, once
with MSSAMPLE_DISABLE_NUMBA=1 and once without, then prints both
columns side by side.

Usage: python3 benchmarks/bench_kernels.py
"""

import json
import os
import subprocess
import sys
import time

import numpy as np


def _bench_cases():
    from mssample import kernels
    from mssample.ptasim import SimConfig, simulate_dataset

    rng = np.random.default_rng(0)
    ds = simulate_dataset(SimConfig(), seed=1)
    ftf, ftd, dtd = ds.products
    x9 = rng.normal(size=9)
    u9 = rng.uniform(-3, 3, size=9)
    a20 = rng.normal(size=20) * 0.3
    rho10 = rng.uniform(-4, 1, size=10)
    lfr = np.log10(ds.freqs / ds.f_ref)
    phi20 = np.power(10.0, np.repeat(rho10, 2))

    return [
        ("classic_funnel_lpg", 20000,
         lambda: kernels.classic_funnel_lpg(x9, 1.3, 3.0)),
        ("generalized_funnel_lpg", 20000,
         lambda: kernels.generalized_funnel_lpg(x9, u9, 4.0)),
        ("coeff_prior_lpg", 20000,
         lambda: kernels.coeff_prior_lpg(a20, phi20)),
        ("pta_quad_lpg", 5000,
         lambda: kernels.pta_quad_lpg(a20, ftf, ftd, dtd, ds.sigma)),
        ("pta_powerlaw_lpg", 5000,
         lambda: kernels.pta_powerlaw_lpg(a20, 0.4, 3.2, lfr, ftf, ftd,
                                          dtd, ds.sigma)),
        ("pta_freespectral_lpg", 5000,
         lambda: kernels.pta_freespectral_lpg(a20, rho10, ftf, ftd, dtd,
                                              ds.sigma)),
    ]


def _run_inner():
    rows = {}
    for name, reps, call in _bench_cases():
        call()  # warm-up: triggers compilation on the jitted path
        t0 = time.perf_counter()
        for _ in range(reps):
            call()
        rows[name] = (time.perf_counter() - t0) / reps * 1e6
    json.dump(rows, sys.stdout)


def main():
    results = {}
    for label, disable in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, MSSAMPLE_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, __file__, "--inner"],
                             capture_output=True, text=True, env=env,
                             check=True)
        results[label] = json.loads(out.stdout)

    width = max(len(k) for k in results["numba"])
    print(f"{'kernel'.ljust(width)}  {'numba us':>10}  {'numpy us':>10}  "
          f"{'speedup':>8}")
    for name in results["numba"]:
        jit = results["numba"][name]
        plain = results["numpy"][name]
        print(f"{name.ljust(width)}  {jit:>10.2f}  {plain:>10.2f}  "
              f"{plain / jit:>7.1f}x")


if __name__ == "__main__":
    if "--inner" in sys.argv:
        _run_inner()
    else:
        main()
