import numpy as np
import pytest

from glss import _pykernels, kernels

try:
    from glss import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_ext
def test_sobel_backends_agree(rng):
    img = rng.random((17, 23))
    for a, b in zip(_ckernels.sobel_xy(img), _pykernels.sobel_xy(img)):
        assert np.allclose(a, b, atol=1e-13, rtol=0)


@needs_ext
@pytest.mark.parametrize("k", [1, 3, 11])
def test_filter_backends_agree(rng, k):
    img = rng.random((20, 15))
    win = rng.random(k)
    assert np.allclose(_ckernels.filter_valid(img, win), _pykernels.filter_valid(img, win), atol=1e-12)


@needs_ext
def test_ssim_moments_backends_agree(rng):
    x, y = rng.random((19, 21)), rng.random((19, 21))
    win = np.exp(-((np.arange(11) - 5) ** 2) / 4.5)
    win /= win.sum()
    assert np.allclose(_ckernels.ssim_moments(x, y, win), _pykernels.ssim_moments(x, y, win), atol=1e-12)


@needs_ext
def test_prefix_min_backends_agree(rng):
    pts, q = rng.random((500, 7)), rng.random(7)
    assert np.allclose(_ckernels.prefix_min_sqdist(pts, q), _pykernels.prefix_min_sqdist(pts, q), atol=1e-13)


def test_filter_valid_is_2d_convolution(rng):
    img = rng.random((9, 10))
    win = np.array([0.25, 0.5, 0.25])
    w2 = np.outer(win, win)
    brute = np.array([[np.sum(img[i:i + 3, j:j + 3] * w2) for j in range(8)] for i in range(7)])
    assert np.allclose(kernels.filter_valid(img, win), brute, atol=1e-14)


def test_prefix_min_against_loop(rng):
    pts, q = rng.random((50, 3)), rng.random(3)
    expected, best = [], np.inf
    for p in pts:
        best = min(best, float(np.sum((p - q) ** 2)))
        expected.append(best)
    assert np.allclose(kernels.prefix_min_sqdist(pts, q), expected)
    assert np.all(np.diff(kernels.prefix_min_sqdist(pts, q)) <= 0)
