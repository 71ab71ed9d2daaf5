"""Backend selection for the float64 image and distance kernels.

The compiled extension is used when it was built; set ``GLSS_PURE_PYTHON=1``
to force the numpy fallback. Both backends take C-contiguous float64 arrays.
"""
import os

import numpy as np

from glss import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GLSS_PURE_PYTHON", "") != "1":
    try:
        from glss import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def sobel_xy(img):
    return _impl.sobel_xy(_f64(img))


def filter_valid(img, win):
    return _impl.filter_valid(_f64(img), _f64(win))


def ssim_moments(x, y, win):
    return _impl.ssim_moments(_f64(x), _f64(y), _f64(win))


def prefix_min_sqdist(points, query):
    return _impl.prefix_min_sqdist(_f64(points), _f64(query))
