"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --repeat 5

Both backends are run on identical inputs and their outputs are checked for
bitwise equality before any timing is reported.
"""
import argparse
import sys
import timeit

import numpy as np

from hybridattn import _fallback

try:
    from hybridattn import _core
except ImportError:
    _core = None


def cases(rng, scale):
    a = rng.standard_normal((64 * scale, 64))
    b = rng.standard_normal((64, 64))
    n, d = 256 * scale, 32
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    kv0 = np.zeros((d, d))
    x = rng.standard_normal((256 * scale, 256))
    return {
        "matmul": lambda m: m.matmul(a, b),
        "decay_scan": lambda m: m.decay_scan(q, k, v, 0.96875, kv0, False),
        "decay_scan_bf16": lambda m: m.decay_scan(q, k, v, 0.96875, kv0, True),
        "round_bf16": lambda m: m.round_bf16(x),
    }


def same(x, y):
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.array_equal(x, y)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=int, default=1, help="multiplies the row count of each input")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 2

    print(f"{'kernel':<16} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>9}")
    for name, fn in cases(np.random.default_rng(args.seed), args.scale).items():
        if not same(fn(_fallback), fn(_core)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16} {t_py:>12.3f} {t_cy:>12.3f} {t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
