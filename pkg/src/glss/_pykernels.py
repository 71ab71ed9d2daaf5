"""Pure numpy implementations of the float64 kernels in ``_ckernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sobel_xy(img):
    p = np.pad(img, 1, mode="edge")
    tl, t, tr = p[:-2, :-2], p[:-2, 1:-1], p[:-2, 2:]
    l, r = p[1:-1, :-2], p[1:-1, 2:]
    bl, b, br = p[2:, :-2], p[2:, 1:-1], p[2:, 2:]
    gx = (tr + 2.0 * r + br) - (tl + 2.0 * l + bl)
    gy = (bl + 2.0 * b + br) - (tl + 2.0 * t + tr)
    return gx, gy


def filter_valid(img, win):
    rows = sliding_window_view(img, win.shape[0], axis=1) @ win
    return sliding_window_view(rows, win.shape[0], axis=0) @ win


def ssim_moments(x, y, win):
    mx = filter_valid(x, win)
    my = filter_valid(y, win)
    sxx = filter_valid(x * x, win) - mx * mx
    syy = filter_valid(y * y, win) - my * my
    sxy = filter_valid(x * y, win) - mx * my
    return np.stack([mx, my, sxx, syy, sxy])


def prefix_min_sqdist(points, query):
    d = points - query
    return np.minimum.accumulate(np.einsum("ij,ij->i", d, d))
