"""Time the compiled kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``; prints best-of-N wall time per
kernel and backend, the speed-up, and whether the outputs are bit-identical.
"""

import argparse
import timeit

import numpy as np

from robust_bce import _fallback

try:
    from robust_bce import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(scale: int, rng: np.random.Generator):
    n_epochs = 60 * scale
    states = rng.normal(0, 100, (n_epochs, 3))
    epochs = rng.integers(0, n_epochs, 8 * n_epochs)
    beacons = rng.normal(0, 100, (len(epochs), 2))
    points = rng.normal(size=(500 * scale, 4))
    data = rng.normal(size=(2000 * scale, 4))
    means = rng.normal(size=(10, 4))
    factors = np.tril(rng.normal(size=(10, 4, 4)))
    return {
        "range_predict": (states, epochs, beacons),
        "knn_search": (points, 5),
        "quad_forms": (data, means, factors),
    }


def identical(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scale", type=int, default=4, help="problem size multiplier")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        print("compiled extension not available; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':15s} {'python [ms]':>12s} {'cython [ms]':>12s} {'speed-up':>9s}  identical")
    for name, call_args in cases(args.scale, rng).items():
        slow, fast = getattr(_fallback, name), getattr(_kernels, name)
        t_py = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        same = identical(slow(*call_args), fast(*call_args))
        print(f"{name:15s} {1e3 * t_py:12.2f} {1e3 * t_cy:12.2f} {t_py / t_cy:9.1f}  {same}")


if __name__ == "__main__":
    main()
