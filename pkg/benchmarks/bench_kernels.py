"""Compare the compiled and pure-Python kernels on representative inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend and the
speedup.  Exits non-zero if the two backends disagree on any input.
"""

import argparse
import sys
import timeit

import numpy as np

from streamst import _kernels_py

try:
    from streamst import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    alpha = rng.uniform(0.0, 0.8, 4000)
    batch = rng.uniform(0.0, 0.8, (32, 300))
    lengths = rng.integers(150, 301, size=32)
    delays = np.sort(rng.uniform(0, 20000, 400)).tolist()
    return {
        "fire_walk (T=4000)": ("fire_walk", (alpha, 0.0, 0, 1.0, 1e-9)),
        "fire_walk_batch (32x300)": ("fire_walk_batch", (batch, lengths, 1.0, 1e-9)),
        "lagging (400 tokens)": ("lagging", (delays, 20000.0, 400.0)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; reinstall with Cython available", file=sys.stderr)
        return 1
    ok = True
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        py, cy = getattr(_kernels_py, name), getattr(_ckernels, name)
        ok &= same(py(*call_args), cy(*call_args))
        t_py = min(timeit.repeat(lambda: py(*call_args), number=args.number, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=args.number, repeat=args.repeat))
        scale = 1000.0 / args.number
        print(f"{label:<28}{t_py * scale:>12.3f}{t_cy * scale:>12.3f}{t_py / t_cy:>9.1f}x")
    if not ok:
        print("backends disagree", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
