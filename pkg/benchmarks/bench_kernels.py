"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel: best-of-N seconds for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from unipercept import _kernels_py

try:
    from unipercept import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    masks = [(rng.random((128, 128)) < 0.5).astype(np.uint8) for _ in range(20)]
    blobs = []
    for _ in range(20):
        m = np.zeros((256, 256), np.uint8)
        y, x = rng.integers(0, 200, 2)
        m[y : y + 50, x : x + 40] = 1
        blobs.append(m)
    costs = [rng.random((60, 60)) for _ in range(5)] + [rng.random((30, 300)) for _ in range(5)]
    return masks, blobs, costs


def workloads(mod, masks, blobs, costs):
    enc_noise = [mod.rle_encode(m) for m in masks]
    enc_blobs = [mod.rle_encode(m) for m in blobs]
    return {
        "rle_encode": lambda: [mod.rle_encode(m) for m in masks],
        "rle_decode": lambda: [mod.rle_decode(c, 128, 128) for c in enc_noise],
        "rle_intersection": lambda: [mod.rle_intersection(a, b) for a in enc_blobs for b in enc_blobs],
        "linear_assignment": lambda: [mod.linear_assignment(c) for c in costs],
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    data = cases(np.random.default_rng(0))
    py = workloads(_kernels_py, *data)
    cy = workloads(_kernels, *data) if _kernels is not None else {}
    print(f"{'kernel':<20}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, fn in py.items():
        t_py = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        if name in cy:
            t_cy = min(timeit.repeat(cy[name], number=1, repeat=args.repeat))
            print(f"{name:<20}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>9.1f}x")
        else:
            print(f"{name:<20}{t_py:>12.4f}{'n/a':>12}{'':>10}")


if __name__ == "__main__":
    main()
