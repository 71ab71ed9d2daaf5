import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glss import imgmath as im
from glss.errors import InvalidInputError


def brute_ssim(x, y, p=im.SSIMParams()):
    """Direct per-window evaluation with an explicit 2-D Gaussian window."""
    k = p.window_size
    r = np.arange(k) - k // 2
    w = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * p.window_sigma**2))
    w /= w.sum()
    vals = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            a = x[i:i + k, j:j + k]
            b = y[i:i + k, j:j + k]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cab = (w * (a - ma) * (b - mb)).sum()
            sa, sb = math.sqrt(va), math.sqrt(vb)
            lum = (2 * ma * mb + p.c1) / (ma**2 + mb**2 + p.c1)
            con = (2 * sa * sb + p.c2) / (va + vb + p.c2)
            struct = (cab + p.c3) / (sa * sb + p.c3)
            vals.append(lum**p.alpha * con**p.beta * struct**p.gamma)
    return float(np.mean(vals))


# --- sobel ------------------------------------------------------------------

def test_sobel_constant_is_zero():
    assert np.all(im.sobel_edges(np.full((9, 9), 0.7)) == 0.0)


def test_sobel_step_response():
    img = np.zeros((5, 5))
    img[:, 2:] = 1.0
    gx, gy = im.sobel_gradients(img)
    assert np.all(gy == 0.0)
    assert np.all(gx[:, 1] == 4.0) and np.all(gx[:, 2] == 4.0)
    assert np.all(gx[:, [0, 3, 4]] == 0.0)
    edges = im.sobel_edges(img)[:, :, 0]
    assert np.allclose(edges[:, 1], 4.0 / im.SOBEL_MAX)
    assert np.all(edges[:, [0, 3, 4]] == 0.0)


def test_sobel_transpose_symmetry():
    rng = np.random.default_rng(3)
    img = rng.random((12, 9))
    gx, gy = im.sobel_gradients(img)
    gxt, gyt = im.sobel_gradients(img.T)
    assert np.allclose(gxt, gy.T) and np.allclose(gyt, gx.T)
    assert np.allclose(im.sobel_edges(img.T)[:, :, 0], im.sobel_edges(img)[:, :, 0].T)


def test_sobel_max_matches_enumeration():
    # |G| is convex in the patch, so its max over [0,1]^9 sits at a vertex
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float)
    best = max(
        math.hypot((kx * p).sum(), (kx.T * p).sum())
        for p in (np.array(bits, float).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9))
    )
    assert best == pytest.approx(im.SOBEL_MAX, abs=1e-12)


def test_sobel_multichannel_averages():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8, 3))
    assert np.allclose(im.sobel_edges(img), im.sobel_edges(img.mean(axis=2)))


def test_sobel_rejects_tiny_image():
    with pytest.raises(InvalidInputError):
        im.sobel_edges(np.zeros((2, 5)))


# --- gaussian window ----------------------------------------------------------

def test_gaussian_window_single():
    assert im.gaussian_window(1, 0.3).tolist() == [[1.0]]


def test_gaussian_window_default():
    w = im.gaussian_window(11, 1.5)
    assert abs(w.sum() - 1.0) < 1e-12
    assert w[5, 5] == w.max()
    assert np.all(w > 0)


def test_gaussian_window_flat_limit():
    assert np.allclose(im.gaussian_window(3, 1e6), 1.0 / 9.0, atol=1e-6)


def test_gaussian_window_even_size_rejected():
    with pytest.raises(InvalidInputError):
        im.gaussian_window(4, 1.0)


# --- ssim -------------------------------------------------------------------

def test_ssim_identity():
    x = np.random.default_rng(1).random((20, 20))
    assert im.ssim(x, x) == pytest.approx(1.0, abs=1e-6)


def test_ssim_constant_closed_form():
    a, b = np.full((16, 16), 0.5), np.full((16, 16), 0.25)
    expected = (2 * 0.5 * 0.25 + 1e-4) / (0.5**2 + 0.25**2 + 1e-4)
    assert im.ssim(a, b) == pytest.approx(expected, abs=1e-9)
    assert im.ssim(a, b) == pytest.approx(0.8001, abs=1e-3)
    assert im.ssim_loss(a, b) == pytest.approx(0.1999, abs=1e-3)


@pytest.mark.parametrize("params", [im.SSIMParams(), im.SSIMParams(window_size=7, window_sigma=1.0),
                                    im.SSIMParams(alpha=2.0, beta=0.5, gamma=1.0)])
def test_ssim_matches_brute_force(params):
    rng = np.random.default_rng(4)
    x = rng.random((15, 14))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    assert im.ssim(x, y, params) == pytest.approx(brute_ssim(x, y, params), abs=1e-10)


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(5)
    x, y = rng.random((12, 12, 2)), rng.random((12, 12, 2))
    per = [im.ssim(x[:, :, c], y[:, :, c]) for c in range(2)]
    assert im.ssim(x, y) == pytest.approx(np.mean(per), abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(InvalidInputError):
        im.ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_ssim_window_must_fit():
    with pytest.raises(InvalidInputError):
        im.ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_ssim_params_validation():
    with pytest.raises(InvalidInputError):
        im.SSIMParams(window_size=10)
    p = im.SSIMParams()
    assert p.c1 == pytest.approx(1e-4) and p.c2 == pytest.approx(9e-4) and p.c3 == pytest.approx(4.5e-4)


images = arrays(np.float64, (12, 13), elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_ssim_properties(x, y):
    s = im.ssim(x, y)
    assert im.ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert s == pytest.approx(im.ssim(y, x), abs=1e-12)
    assert -1.0 < s <= 1.0 + 1e-12
    loss = im.ssim_loss(x, y)
    assert loss + s == pytest.approx(1.0, abs=1e-15)
    assert -1e-12 <= loss < 2.0


# --- norm losses --------------------------------------------------------------

def test_mse_mae_examples():
    assert im.mse(np.ones(4), np.ones(4)) == 0.0
    assert im.mse(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
    assert im.mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0
    assert im.mse([0, 0.5], [1, 0.5]) == 0.5
    assert im.mae([0, 0.5], [1, 0.5]) == 0.5
    with pytest.raises(InvalidInputError):
        im.mse(np.zeros(3), np.zeros(4))


# --- mask metrics -------------------------------------------------------------

def test_iou_dice_examples():
    a = np.zeros((4, 4), np.uint8)
    a[:2, :2] = 1
    assert im.iou(a, a) == 1.0 and im.dice(a, a) == 1.0
    b = np.zeros((4, 4), np.uint8)
    b[2:, 2:] = 1
    assert im.iou(a, b) == 0.0 and im.dice(a, b) == 0.0
    c = np.zeros((4, 4), np.uint8)
    c[:2, 1:3] = 1
    assert im.iou(a, c) == pytest.approx(2 / 6)
    assert im.dice(a, c) == pytest.approx(0.5)
    empty = np.zeros((4, 4), np.uint8)
    assert im.iou(empty, empty) == 1.0 and im.dice(empty, empty) == 1.0


def test_mask_metrics_reject_non_binary():
    with pytest.raises(InvalidInputError):
        im.iou(np.full((3, 3), 2), np.zeros((3, 3)))


masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dice_iou_relation(a, b):
    i, d = im.iou(a, b), im.dice(a, b)
    assert i <= d + 1e-15
    assert d == pytest.approx(2 * i / (1 + i), abs=1e-15)


# --- segmentation losses ------------------------------------------------------

def test_losses_perfect_prediction():
    g = np.array([[1, 0], [0, 1]], float)
    p = np.where(g == 1, 1 - 1e-7, 1e-7)
    assert im.bce_loss(p, g) < 1e-5
    assert im.dice_loss(p, g) < 1e-5
    assert im.focal_loss(p, g) < 1e-5


def test_focal_single_pixel():
    val = im.focal_loss(np.array([0.5]), np.array([1.0]), im.FocalParams(2.0, 0.75))
    assert val == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-12)
    assert val == pytest.approx(0.1300, abs=1e-4)


def test_focal_gamma_zero_is_half_bce():
    rng = np.random.default_rng(7)
    p, g = rng.random(200), (rng.random(200) > 0.5).astype(float)
    assert im.focal_loss(p, g, im.FocalParams(0.0, 0.5)) == pytest.approx(0.5 * im.bce_loss(p, g), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(0, 1)), arrays(np.uint8, 30, elements=st.integers(0, 1)),
       st.floats(0.05, 0.95))
def test_focal_gamma_zero_is_alpha_weighted_bce(p, g, alpha):
    pc = np.clip(p, im.PROB_EPS, 1 - im.PROB_EPS)
    weighted = np.mean(-np.where(g == 1, alpha * np.log(pc), (1 - alpha) * np.log1p(-pc)))
    assert im.focal_loss(p, g, im.FocalParams(0.0, alpha)) == pytest.approx(weighted, abs=1e-9)


def test_losses_reject_out_of_range_probabilities():
    with pytest.raises(InvalidInputError):
        im.bce_loss(np.array([1.2]), np.array([1.0]))
    with pytest.raises(InvalidInputError):
        im.FocalParams(alpha=1.0)


# --- KL -----------------------------------------------------------------------

def test_kl_zero_at_prior():
    assert im.kl_diag_gaussian(np.zeros(5), np.zeros(5)) == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(11)
    mu, lv = 1.0, 0.0
    z = mu + math.exp(lv / 2) * rng.standard_normal(1_000_000)
    log_q = -0.5 * ((z - mu) ** 2 / math.exp(lv) + lv + math.log(2 * math.pi))
    log_p = -0.5 * (z**2 + math.log(2 * math.pi))
    mc = float(np.mean(log_q - log_p))
    assert im.kl_diag_gaussian([mu], [lv]) == pytest.approx(0.5)
    assert abs(mc - 0.5) < 1e-2


def test_kl_length_mismatch():
    with pytest.raises(InvalidInputError):
        im.kl_diag_gaussian(np.zeros(2), np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_kl_non_negative(mu, lv):
    kl = im.kl_diag_gaussian(mu, lv)
    assert kl >= 0.0
    if np.any(np.abs(mu) > 1e-6) or np.any(np.abs(lv) > 1e-6):
        assert kl > 0.0


def test_pure_and_repeatable():
    rng = np.random.default_rng(2)
    x, y = rng.random((16, 16)), rng.random((16, 16))
    assert im.ssim(x, y) == im.ssim(x, y)
    assert np.array_equal(im.sobel_edges(x), im.sobel_edges(x))


def test_as_image_clamping_is_explicit():
    with pytest.raises(InvalidInputError):
        im.as_image(np.array([[1.5]]))
    assert im.as_image(np.array([[1.5]]), clamp=True)[0, 0, 0] == 1.0
