"""Compare the numba and numpy accumulation kernels.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Prints the
median wall time per call for each kernel at a few problem sizes, plus a
full Kronecker fit under each backend.
"""

import argparse
import statistics
import time

import numpy as np

from crossgee import _kernels as K
from crossgee import simulation as sim
from crossgee.engine import FitOptions, fit


def _time(fn, repeat):
    fn()  # warm-up (and numba compilation)
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def kernel_inputs(n, m, p, seed=0):
    rng = np.random.default_rng(seed)
    Et = rng.standard_normal((n, m, p))
    e = rng.standard_normal((n, m))
    A = rng.standard_normal((m, m))
    rinv = (A @ A.T / m + np.eye(m))[None]
    return Et, e, rinv, np.zeros(n, dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    print(f"{'kernel':<12}{'n':>6}{'m':>5}{'p':>5}{'numba ms':>12}{'numpy ms':>12}")
    for n, m, p in [(20, 15, 10), (100, 15, 10), (200, 30, 8), (1000, 15, 10)]:
        data = kernel_inputs(n, m, p)
        tn = _time(lambda: K.gee_sums(*data, backend="numba"), args.repeat)
        tp = _time(lambda: K.gee_sums(*data, backend="numpy"), args.repeat)
        print(f"{'gee_sums':<12}{n:>6}{m:>5}{p:>5}{tn * 1e3:>12.4f}{tp * 1e3:>12.4f}")
    for n, P, L in [(100, 3, 5), (1000, 3, 5)]:
        C = np.random.default_rng(1).standard_normal((n, P, L))
        R1 = np.eye(L)
        tn = _time(lambda: K.psi_moments(C, R1, backend="numba"), args.repeat)
        tp = _time(lambda: K.psi_moments(C, R1, backend="numpy"), args.repeat)
        print(f"{'psi_moments':<12}{n:>6}{P * L:>5}{'-':>5}{tn * 1e3:>12.4f}{tp * 1e3:>12.4f}")

    sc = sim.SimScenario()
    params = sim.draw_scenario_parameters(sc, 1)
    ds = sim.generate_dataset(sc, params, 50, np.random.default_rng(2))
    for backend in ("numba", "numpy"):
        opts = FitOptions(backend=backend)
        t = _time(lambda: fit(ds, sc.formula, "gaussian", "kron_ar1", opts), max(3, args.repeat // 5))
        print(f"full kron_ar1 fit, n=100 subjects, backend={backend}: {t * 1e3:.2f} ms")
    print(f"default backend: {K.active_backend()}")


if __name__ == "__main__":
    main()
