"""Differentiable torch versions of the image losses, for ``N x C x H x W`` batches.

These mirror ``glss.imgmath`` (which stays the float64 reference) and are
what training and latent search backpropagate through.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from glss.imgmath import PROB_EPS, SOBEL_MAX, FocalParams, SSIMParams, gaussian_window_1d

_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
_SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))


def sobel_edges(x: torch.Tensor) -> torch.Tensor:
    """Scaled Sobel magnitude of the channel mean, shape ``N x 1 x H x W``."""
    gray = x.mean(dim=1, keepdim=True)
    k = torch.tensor((_SOBEL_X, _SOBEL_Y), dtype=x.dtype, device=x.device).unsqueeze(1)
    g = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), k)
    mag = torch.sqrt(g[:, :1] ** 2 + g[:, 1:] ** 2 + 1e-24) / SOBEL_MAX
    return mag.clamp(0.0, 1.0)


def _window(p: SSIMParams, channels: int, like: torch.Tensor) -> torch.Tensor:
    g = torch.as_tensor(gaussian_window_1d(p.window_size, p.window_sigma), dtype=like.dtype)
    w = torch.outer(g, g)
    return w.expand(channels, 1, p.window_size, p.window_size).contiguous().to(like.device)


def ssim_per_image(x: torch.Tensor, y: torch.Tensor, p: SSIMParams = SSIMParams()) -> torch.Tensor:
    """Mean SSIM per batch element over valid windows and channels."""
    c = x.shape[1]
    w = _window(p, c, x)
    mx = F.conv2d(x, w, groups=c)
    my = F.conv2d(y, w, groups=c)
    vx = F.conv2d(x * x, w, groups=c) - mx * mx
    vy = F.conv2d(y * y, w, groups=c) - my * my
    cxy = F.conv2d(x * y, w, groups=c) - mx * my
    if p.simplified:
        smap = ((2 * mx * my + p.c1) * (2 * cxy + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
    else:
        sx = torch.sqrt(vx.clamp_min(0.0) + 1e-24)
        sy = torch.sqrt(vy.clamp_min(0.0) + 1e-24)
        lum = (2 * mx * my + p.c1) / (mx * mx + my * my + p.c1)
        con = (2 * sx * sy + p.c2) / (vx + vy + p.c2)
        st = (cxy + p.c3) / (sx * sy + p.c3)
        smap = lum**p.alpha * con**p.beta * torch.sign(st) * st.abs() ** p.gamma
    return smap.flatten(1).mean(dim=1)


def ssim_loss_per_image(x, y, p: SSIMParams = SSIMParams()) -> torch.Tensor:
    return 1.0 - ssim_per_image(x, y, p)


def mse_per_image(x, y) -> torch.Tensor:
    return ((x - y) ** 2).flatten(1).mean(dim=1)


def mae_per_image(x, y) -> torch.Tensor:
    return (x - y).abs().flatten(1).mean(dim=1)


METRICS = {
    "ssim": ssim_loss_per_image,
    "mse": mse_per_image,
    "mae": mae_per_image,
}


def bce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(g * torch.log(p) + (1 - g) * torch.log1p(-p)).mean()


def dice_loss(p: torch.Tensor, g: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return 1.0 - (2.0 * (p * g).sum() + smooth) / (p.sum() + g.sum() + smooth)


def focal_loss(p: torch.Tensor, g: torch.Tensor, fp: FocalParams = FocalParams()) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(g > 0.5, p, 1.0 - p)
    alpha_t = torch.where(g > 0.5, torch.full_like(p, fp.alpha), torch.full_like(p, 1.0 - fp.alpha))
    return (-alpha_t * (1.0 - p_t) ** fp.gamma * torch.log(p_t)).mean()


def kl_diag_gaussian(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Closed-form KL to N(0, I), summed over the last dimension."""
    return 0.5 * (mu * mu + torch.expm1(log_var) - log_var).sum(dim=-1)
