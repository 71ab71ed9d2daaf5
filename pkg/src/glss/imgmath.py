"""Float64 image mathematics: edges, SSIM, norm losses, mask metrics.

Images are ``H x W x C`` arrays with values in [0, 1]; 2-D arrays are read as
a single channel. Masks are ``H x W`` arrays with values in {0, 1}. Every
function here is pure and works in 64-bit floating point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from glss import kernels
from glss.errors import InvalidInputError

# Largest possible |G| = sqrt(Gx^2 + Gy^2) for pixel values in [0, 1].
SOBEL_MAX = 2.0 * math.sqrt(5.0)
PROB_EPS = 1e-7


@dataclass(frozen=True)
class SSIMParams:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvalidInputError(f"window_size must be odd and positive, got {self.window_size}")
        if self.window_sigma <= 0:
            raise InvalidInputError("window_sigma must be positive")
        for name in ("k1", "k2", "dynamic_range", "alpha", "beta", "gamma"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    @property
    def simplified(self) -> bool:
        return self.alpha == 1.0 and self.beta == 1.0 and self.gamma == 1.0


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.75

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidInputError("focal gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("focal alpha must lie in (0, 1)")


def as_image(data, clamp: bool = False) -> np.ndarray:
    """Validate ``data`` as an image and return it as ``H x W x C`` float64.

    Out-of-range values raise unless ``clamp`` is set.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise InvalidInputError(f"expected an H x W x C image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("image contains non-finite values")
    if clamp:
        return np.clip(arr, 0.0, 1.0)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError("image values must lie in [0, 1]")
    return arr


def as_mask(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise InvalidInputError(f"expected an H x W mask, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def _same_shape(x, y):
    if x.shape != y.shape:
        raise InvalidInputError(f"shape mismatch: {x.shape} vs {y.shape}")


def to_gray(img) -> np.ndarray:
    img = as_image(img)
    return img.mean(axis=2) if img.shape[2] > 1 else img[:, :, 0]


def sobel_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Raw horizontal and vertical Sobel responses with replicate borders."""
    gray = to_gray(img)
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise InvalidInputError(f"image must be at least 3x3 for Sobel, got {gray.shape}")
    return kernels.sobel_xy(gray)


def sobel_edges(img) -> np.ndarray:
    """Gradient magnitude scaled into [0, 1], returned as ``H x W x 1``."""
    gx, gy = sobel_gradients(img)
    mag = np.sqrt(gx * gx + gy * gy) / SOBEL_MAX
    return np.clip(mag, 0.0, 1.0)[:, :, None]


def gaussian_window_1d(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise InvalidInputError(f"window size must be odd and positive, got {size}")
    if sigma <= 0:
        raise InvalidInputError("sigma must be positive")
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    g = gaussian_window_1d(size, sigma)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, y, p: SSIMParams = SSIMParams()) -> np.ndarray:
    """Per-window SSIM values, shape ``C x H' x W'`` over the valid region."""
    x = as_image(x)
    y = as_image(y)
    _same_shape(x, y)
    k = p.window_size
    if x.shape[0] < k or x.shape[1] < k:
        raise InvalidInputError(f"image {x.shape[:2]} smaller than SSIM window {k}")
    win = gaussian_window_1d(k, p.window_sigma)
    maps = []
    for c in range(x.shape[2]):
        mx, my, vx, vy, cxy = kernels.ssim_moments(x[:, :, c], y[:, :, c], win)
        if p.simplified:
            num = (2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2)
            den = (mx * mx + my * my + p.c1) * (vx + vy + p.c2)
            maps.append(num / den)
        else:
            sx = np.sqrt(np.maximum(vx, 0.0))
            sy = np.sqrt(np.maximum(vy, 0.0))
            lum = (2.0 * mx * my + p.c1) / (mx * mx + my * my + p.c1)
            con = (2.0 * sx * sy + p.c2) / (vx + vy + p.c2)
            struct = (cxy + p.c3) / (sx * sy + p.c3)
            # fractional powers of a negative structure term are undefined
            maps.append(lum**p.alpha * con**p.beta * np.sign(struct) * np.abs(struct) ** p.gamma)
    return np.stack(maps)


def ssim(x, y, p: SSIMParams = SSIMParams()) -> float:
    """Mean SSIM over all valid windows and channels."""
    return float(ssim_map(x, y, p).mean())


def ssim_loss(x, y, p: SSIMParams = SSIMParams()) -> float:
    return 1.0 - ssim(x, y, p)


def mse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    d = x - y
    return float(np.mean(d * d))


def mae(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_shape(x, y)
    return float(np.mean(np.abs(x - y)))


def iou(pred, gt) -> float:
    pred = as_mask(pred).astype(bool)
    gt = as_mask(gt).astype(bool)
    _same_shape(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def dice(pred, gt) -> float:
    pred = as_mask(pred).astype(bool)
    gt = as_mask(gt).astype(bool)
    _same_shape(pred, gt)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(pred & gt) / total


def _probs_and_labels(pred_prob, gt):
    p = np.asarray(pred_prob, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _same_shape(p, g)
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise InvalidInputError("probabilities must lie in [0, 1]")
    if not np.all((g == 0) | (g == 1)):
        raise InvalidInputError("labels must be 0 or 1")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS), g


def bce_loss(pred_prob, gt) -> float:
    p, g = _probs_and_labels(pred_prob, gt)
    return float(-np.mean(g * np.log(p) + (1.0 - g) * np.log1p(-p)))


def dice_loss(pred_prob, gt, smooth: float = 1.0) -> float:
    p, g = _probs_and_labels(pred_prob, gt)
    return float(1.0 - (2.0 * np.sum(p * g) + smooth) / (np.sum(p) + np.sum(g) + smooth))


def focal_loss(pred_prob, gt, fp: FocalParams = FocalParams()) -> float:
    p, g = _probs_and_labels(pred_prob, gt)
    p_t = np.where(g == 1, p, 1.0 - p)
    alpha_t = np.where(g == 1, fp.alpha, 1.0 - fp.alpha)
    return float(np.mean(-alpha_t * (1.0 - p_t) ** fp.gamma * np.log(p_t)))


def kl_diag_gaussian(mu, log_var) -> float:
    """KL divergence from N(mu, exp(log_var)) to N(0, I), summed over dimensions."""
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    if mu.shape != log_var.shape:
        raise InvalidInputError(f"length mismatch: {mu.shape} vs {log_var.shape}")
    if not np.all(np.isfinite(log_var)):
        raise InvalidInputError("log_var must be finite")
    return float(0.5 * np.sum(mu * mu + np.expm1(log_var) - log_var))
