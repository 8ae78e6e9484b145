"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]

Each kernel is run on the same seeded inputs through both variants; the
script checks the outputs agree before timing.  The numba column is skipped
when the numba backend is disabled (SUPERNAS_BACKEND=numpy).
"""

import argparse
import csv
import sys
import time

import numpy as np

from supernas import kernels
from supernas._backend import HAS_NUMBA


def _time(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    u = rng.standard_normal((16, 16, 8))
    A = 0.3 * rng.standard_normal((8, 8))
    h = kernels.scan_forward_np(u, A)
    gh = rng.standard_normal(u.shape)
    F = rng.random((192, 3))
    P = rng.random((64, 3))
    P = P[np.argsort(P[:, 2], kind="stable")]
    ref = np.full(3, 1.1)
    yield "scan_forward (16x16x8)", kernels.scan_forward_nb, kernels.scan_forward_np, (u, A)
    yield "scan_backward (16x16x8)", kernels.scan_backward_nb, kernels.scan_backward_np, (gh, h, A)
    yield "domination_matrix (192x3)", kernels.domination_matrix_nb, kernels.domination_matrix_np, (F,)
    yield "nondominated_ranks (192x3)", kernels.nondominated_ranks_nb, kernels.nondominated_ranks_np, (F,)
    yield "hv3d (64 pts)", kernels.hv3d_sorted_nb, kernels.hv3d_sorted_np, (P, ref)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, nb, npf, inp in cases(rng):
        t_np = _time(npf, inp, args.repeat)
        t_nb = None
        if HAS_NUMBA:
            if not _same(nb(*inp), npf(*inp)):
                print(f"{name}: numba and numpy outputs differ", file=sys.stderr)
                return 1
            t_nb = _time(nb, inp, args.repeat)
        sp = t_np / t_nb if t_nb else float("nan")
        nb_s = f"{t_nb * 1e3:10.4f}" if t_nb else f"{'-':>10}"
        print(f"{name:<28}{t_np * 1e3:10.4f}{nb_s}{sp:9.1f}")
        rows.append((name, t_np, t_nb, sp))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "numpy_s", "numba_s", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
