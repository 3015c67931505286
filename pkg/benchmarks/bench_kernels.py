"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both paths are checked for identical output before timing. The first numba
call (compilation) is excluded.
"""

import argparse
import time

import numpy as np

from mlmp import _accel


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    label = rng.integers(0, 21, size=(512, 512))
    label[rng.random(label.shape) < 0.05] = 255
    pred = rng.integers(0, 21, size=(512, 512))
    yield ("confusion 512x512 K=21",
           lambda: _accel.confusion_counts_numpy(label, pred, 21),
           lambda: _accel.confusion_counts_numba(label, pred, 21))

    img = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    max_delta, iterations = 4, 2  # glass blur at severity 5
    offsets = rng.integers(-max_delta, max_delta,
                           size=(iterations, _accel.glass_sites(224, 224, max_delta), 2))
    yield ("glass shuffle 224x224",
           lambda: _accel.glass_shuffle_numpy(img, offsets, max_delta),
           lambda: _accel.glass_shuffle_numba(img, offsets, max_delta))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is unavailable or disabled (MLMP_DISABLE_NUMBA); nothing to compare")

    print(f"{'kernel':<26}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, slow, fast in cases(np.random.default_rng(0)):
        if not np.array_equal(slow(), fast()):  # also warms up the JIT
            raise SystemExit(f"{name}: backends disagree")
        t_np, t_nb = best_of(slow, args.repeats), best_of(fast, args.repeats)
        print(f"{name:<26}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
