"""Compare the compiled and numpy kernel backends on representative inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the median time per call for each kernel and backend, the speedup,
and the largest absolute difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np

from glss import _pykernels

try:
    from glss import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None


def _cases(rng):
    win = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    win /= win.sum()
    img = rng.random((64, 64))
    other = rng.random((64, 64))
    pts = rng.random((10_000, 2))
    patches = rng.random((10_000, 121))
    return {
        "sobel_xy 64x64": ("sobel_xy", (img,)),
        "filter_valid 64x64 w11": ("filter_valid", (img, win)),
        "ssim_moments 64x64 w11": ("ssim_moments", (img, other, win)),
        "prefix_min_sqdist 1e4x2": ("prefix_min_sqdist", (pts, pts[0] + 0.1)),
        "prefix_min_sqdist 1e4x121": ("prefix_min_sqdist", (patches, patches[0] * 0.5)),
    }


def _time(fn, args, repeat):
    fn(*args)
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython us':>10s} {'numpy us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (fn, fargs) in _cases(rng).items():
        tc = _time(getattr(_ckernels, fn), fargs, args.repeat)
        tp = _time(getattr(_pykernels, fn), fargs, args.repeat)
        diff = _maxdiff(getattr(_ckernels, fn)(*fargs), getattr(_pykernels, fn)(*fargs))
        print(f"{name:28s} {tc * 1e6:10.1f} {tp * 1e6:10.1f} {tp / tc:8.2f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
