"""Time the numba kernels against the pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--height 240] [--width 320] [--ndisp 32] [--repeat 3]

Both backends are imported directly, so ``MVSUQ_DISABLE_NUMBA`` does not
matter here. Each backend's outputs are checked for bit-identity.
"""

import argparse
import time

import numpy as np
from scipy import ndimage

from mvsuq import kernels
from mvsuq.stereo import DIRECTIONS_8


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def cases(H, W, D, seed=0):
    rng = np.random.default_rng(seed)
    img = np.rint(128 + 40 * ndimage.gaussian_filter(rng.normal(size=(H, W)), 1.0) / 0.28).clip(0, 255)
    img = img.astype(np.int32)
    valid = np.ones((H, W), bool)
    bits, ok = kernels.numpy_backend.census(img, valid, 7, 9)
    bits_r = np.roll(bits, -5, axis=1)
    offset = np.zeros((H, W), np.int32)
    cost, _ = kernels.numpy_backend.hamming_cost(bits, ok, bits_r, ok, offset, D, 62)
    dirs = np.asarray(DIRECTIONS_8, np.int64)
    vals = np.sort(100 * (1 + rng.normal(0, 0.01, (H * W // 4, 10))), axis=1)
    counts = np.full(len(vals), 10, np.int64)
    return {
        "census": (img, valid, 7, 9),
        "hamming_cost": (bits, ok, bits_r, ok, offset, D, 62),
        "sgm": (cost, offset, img, 8, 32, True, dirs),
        "consistent_subsets": (vals, counts, 0.01),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--ndisp", type=int, default=32)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    if kernels.numba_backend is None:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':20s} {'numpy s':>10s} {'numba s':>10s} {'speed-up':>9s}  identical")
    for name, call_args in cases(args.height, args.width, args.ndisp).items():
        getattr(kernels.numba_backend, name)(*call_args)  # compile outside the timing
        t_np, out_np = best_of(lambda: getattr(kernels.numpy_backend, name)(*call_args), args.repeat)
        t_nb, out_nb = best_of(lambda: getattr(kernels.numba_backend, name)(*call_args), args.repeat)
        print(f"{name:20s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x  {same(out_np, out_nb)}")


if __name__ == "__main__":
    main()
