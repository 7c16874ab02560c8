"""Time the count-only cache simulation with and without numba.

    python benchmarks/bench_kernels.py [--streams 2000] [--rounds 500] [--repeat 3]

Both paths run on the same pre-sampled stream and must return identical
arrays; the script exits non-zero if they do not.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from streamfl._accel import HAVE_NUMBA
from streamfl._kernels import simulate_counts
from streamfl.distributions import RegimeSet, build_regimes, sample_stream_counts
from streamfl.rng import substream


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--streams", type=int, default=2000)
    parser.add_argument("--rounds", type=int, default=500)
    parser.add_argument("--batch-size", type=int, default=150)
    parser.add_argument("--M", type=int, default=5)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is disabled or missing; nothing to compare", file=sys.stderr)
        return 1

    regimes = build_regimes(substream(0, 0, "regimes"), 10, 10, 0.5, [0, 1, 2])
    rs = RegimeSet.build(regimes, 1.0)
    stream = sample_stream_counts(rs, args.batch_size, args.rounds, substream(0, 0, "bench"), n_streams=args.streams)
    pi = rs.long_term()
    capacity = args.M * args.batch_size
    probes = np.array([50, args.rounds])

    print(f"{args.streams} streams x {args.rounds} rounds, B={capacity}, B_s={args.batch_size}")
    print(f"{'policy':<6} {'numpy s':>9} {'numba s':>9} {'speedup':>8}")
    ok = True
    for kind in ("FIFO", "SRSR", "DRSR", "LAZY"):
        run = lambda nb: simulate_counts(kind, stream, capacity, args.batch_size, 2 / 3, pi, probes, use_numba=nb)
        ok &= np.array_equal(run(True), run(False))  # also warms the JIT
        t_np = best_of(lambda: run(False), args.repeat)
        t_nb = best_of(lambda: run(True), args.repeat)
        print(f"{kind:<6} {t_np:9.3f} {t_nb:9.3f} {t_np / t_nb:8.1f}x")
    if not ok:
        print("numba and numpy results differ", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
