"""Numba vs numpy timings for the Hamming and AP kernels.

    python benchmarks/bench_kernels.py --queries 500 --db 8000 --bits 64

Both paths are checked for identical results before timing.
"""
import argparse
import time

import numpy as np

from pharos import kernels
from pharos._accel import HAVE_NUMBA


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--db", type=int, default=8000)
    ap.add_argument("--bits", type=int, default=64)
    ap.add_argument("--topn", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    w = (args.bits + 63) // 64
    q = rng.integers(0, 2 ** 63, size=(args.queries, w), dtype=np.uint64)
    db = rng.integers(0, 2 ** 63, size=(args.db, w), dtype=np.uint64)
    tail = args.bits % 64
    if tail:
        q[:, -1] &= np.uint64((1 << tail) - 1)
        db[:, -1] &= np.uint64((1 << tail) - 1)
    topn = min(args.topn, args.db)
    rel = rng.random((args.queries, topn)) < 0.4

    cases = {
        "hamming_distances": lambda nb: kernels.hamming_distances(q, db, use_numba=nb),
        "hamming_topn": lambda nb: kernels.hamming_topn(q, db, args.bits, topn, use_numba=nb),
        "average_precision": lambda nb: kernels.average_precision_rows(rel, use_numba=nb),
    }
    print(f"{args.queries} queries x {args.db} codes, K={args.bits}, top {topn}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for name, fn in cases.items():
        a, b = fn(True), fn(False)      # also warms the JIT
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.allclose(a, b)
        if not same:
            raise SystemExit(f"{name}: numba and numpy results differ")
        t_nb = best_of(lambda: fn(True), args.repeat)
        t_np = best_of(lambda: fn(False), args.repeat)
        print(f"{name:<20}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
