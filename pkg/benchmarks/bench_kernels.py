"""Time the numba kernels against their numpy twins, then one end-to-end workload per backend.

    python benchmarks/bench_kernels.py [--repeat 7] [--batch 4096]

Kernel timings call ``*_numba`` and ``*_numpy`` directly in this process.
The end-to-end rows run a fresh interpreter per backend, with
CAUSTICA_DISABLE_NUMBA set for the numpy run, so the switch is exercised
exactly as a user would flip it.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from caustica import _kernels as K
from caustica import _dop853 as tab
from caustica._accel import NUMBA_AVAILABLE

WORKLOAD = """
import time, numpy as np
from caustica import preset, density_batch
s = preset("ex_1_3_cusp_smooth")
xs = np.linspace(-3, 3, {n})[:, None]
density_batch(s.hamiltonian, s.initial, xs[:8], 1.0, s.xi_box, s.tolerances)  # warm-up / JIT
t0 = time.perf_counter()
density_batch(s.hamiltonian, s.initial, xs, 2.0, s.xi_box, s.tolerances)
print(time.perf_counter() - t0)
"""


def kernel_cases(batch: int, rng: np.random.Generator):
    n = 7  # augmented state width for d = 1: x, xi, S, 2x2 Jacobian
    y = rng.standard_normal((batch, n))
    stages = rng.standard_normal((tab.N_STAGES + 1, batch, n))  # 12 stages plus the FSAL derivative
    h = rng.uniform(1e-3, 1e-2, batch)
    scale = 1e-12 + np.abs(y) * 1e-10
    d = 1
    hxx, hmix, hpp = (rng.standard_normal((batch, d, d)) for _ in range(3))
    J = rng.standard_normal((batch, 2 * d, 2 * d))
    psi = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
    rows = np.arange(0, 1024, 4, dtype=np.int64)
    f = rng.standard_normal((batch, 65))
    return {
        "combine_stages": (stages[0], stages, np.ascontiguousarray(tab.B), h),
        "dop853_error_norm": (stages, tab.E5, tab.E3, h, scale),
        "variational_rate": (hxx, hmix, hpp, J),
        "wigner_lags": (psi, rows),
        "sign_change_mask": (f,),
    }


def best_of(fn, args, repeat: int) -> float:
    fn(*args)  # compile / warm caches
    number = 5
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def end_to_end(n: int, disable: bool) -> float:
    env = dict(os.environ)
    env["CAUSTICA_DISABLE_NUMBA"] = "1" if disable else "0"
    out = subprocess.run([sys.executable, "-c", WORKLOAD.format(n=n)], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--points", type=int, default=512, help="density points in the end-to-end run")
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        print("numba is not importable: the *_numba variants run as plain Python")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}  rel. diff")
    for name, a in kernel_cases(args.batch, rng).items():
        f_np = getattr(K, f"{name}_numpy")
        f_nb = getattr(K, f"{name}_numba")
        r_np = np.asarray(f_np(*a), dtype=complex)
        r_nb = np.asarray(f_nb(*a), dtype=complex)
        diff = float(np.max(np.abs(r_np - r_nb)) / max(1.0, float(np.max(np.abs(r_np)))))
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.2f}  {diff:.1e}")
    if args.skip_end_to_end:
        return
    t_np = end_to_end(args.points, disable=True)
    t_nb = end_to_end(args.points, disable=False)
    print(f"\ndensity_batch, {args.points} points, smooth cusp at t = 2")
    print(f"  numpy backend  {t_np:8.3f} s")
    print(f"  numba backend  {t_nb:8.3f} s   speedup {t_np / t_nb:.2f}x")


if __name__ == "__main__":
    main()
