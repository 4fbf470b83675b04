"""Time the greedy permutation-set kernel with numba and with plain numpy.

    python3 benchmarks/bench_permset.py [--pool-sizes 10000 100000] [--count 35] [--repeats 3]

Both kernels must return identical selections; the script exits non-zero
otherwise.  The numba timing excludes JIT compilation (one warm-up call).
"""
import argparse
import sys
import time

import numpy as np

from fewshot_ssl import _accel
from fewshot_ssl.permset import candidate_pool, greedy_select


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--n", type=int, default=9)
    parser.add_argument("--count", type=int, default=35)
    parser.add_argument("--pool-sizes", type=int, nargs="+", default=[10_000, 100_000, 300_000])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy kernel can run")
        return 1
    first = np.arange(args.n, dtype=np.int8)
    greedy_select(candidate_pool(args.n, False, 1000), first, 2, use_numba=True)  # compile

    print(f"{'pool':>8} {'numpy s':>9} {'numba s':>9} {'speed-up':>9}")
    for size in args.pool_sizes:
        pool = candidate_pool(args.n, False, size)
        t_np, sel_np = best_of(lambda: greedy_select(pool, first, args.count - 1, use_numba=False), args.repeats)
        t_nb, sel_nb = best_of(lambda: greedy_select(pool, first, args.count - 1, use_numba=True), args.repeats)
        if not np.array_equal(sel_np, sel_nb):
            print(f"kernels disagree for pool size {size}", file=sys.stderr)
            return 2
        print(f"{len(pool):>8} {t_np:>9.4f} {t_nb:>9.4f} {t_np / t_nb:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
