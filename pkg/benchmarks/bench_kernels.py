"""Time the numba loop kernels against their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``.  Both variants are
called directly (``.loop`` and ``.numpy``), so the result does not depend
on ``ATTNLAB_NO_NUMBA``.  The first compiled call is excluded from timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from attnlab.kernels import exp_weights, sqdist


def bench(fn, args, repeat: int) -> float:
    fn(*args)  # warm-up (triggers compilation for the loop variant)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    g = np.random.default_rng(0)
    cases = []
    for n, m, d in ((256, 256, 4), (1024, 1024, 4), (2048, 2048, 16)):
        A, B = g.standard_normal((n, d)), g.standard_normal((m, d))
        cases.append((f"sqdist {n}x{m}x{d}", sqdist, (A, B)))
    for n, L, d in ((20_000, 8, 3), (200_000, 8, 3), (200_000, 32, 3)):
        S = g.standard_normal((n, d))
        C = g.standard_normal((L, d))
        coef = np.full(L, 1.0 / L)
        cases.append((f"exp_weights n={n} L={L}", exp_weights, (S, C, coef, 1.0)))
    print(f"{'case':32s} {'numba [ms]':>12s} {'numpy [ms]':>12s} {'speedup':>9s} {'max |diff|':>11s}")
    for label, fn, fargs in cases:
        t_loop = bench(fn.loop, fargs, args.repeat)
        t_np = bench(fn.numpy, fargs, args.repeat)
        diff = float(np.max(np.abs(fn.loop(*fargs) - fn.numpy(*fargs))))
        print(f"{label:32s} {1e3 * t_loop:12.3f} {1e3 * t_np:12.3f} {t_np / t_loop:9.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
