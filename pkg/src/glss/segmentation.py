"""Source-only segmentation network, also used as the frozen perceptual model."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from glss import diffops
from glss.checkpoint import read_archive, write_archive
from glss.datagen import DomainDataset
from glss.errors import InvalidInputError, TrainingDivergedError
from glss.imgmath import FocalParams, as_image

log = logging.getLogger(__name__)

SEG_FORMAT = "glss-seg-v1"
LOSS_MODES = ("dice_bce", "focal")


@dataclass(frozen=True)
class SegConfig:
    epochs: int = 120
    batch_size: int = 32
    learning_rate: float = 1e-3
    loss_mode: str = "dice_bce"
    focal: FocalParams = FocalParams()
    threshold: float = 0.5
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise InvalidInputError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInputError("invalid segmentation training schedule")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("threshold must lie in (0, 1)")


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Three-level U-Net with a sigmoid head.

    ``feature_layers`` names the activations that ``features`` can return;
    index 2 is the bottleneck.
    """

    feature_layers = ("enc1", "enc2", "bottleneck", "dec2", "dec1")

    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.enc1 = _double_conv(1, c1)
        self.enc2 = _double_conv(c1, c2)
        self.bottleneck = _double_conv(c2, c3)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.dec2 = _double_conv(2 * c2, c2)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.dec1 = _double_conv(2 * c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)
        self.pool = nn.MaxPool2d(2)

    def _run(self, x, stop=None):
        e1 = self.enc1(x)
        if stop == 0:
            return e1
        e2 = self.enc2(self.pool(e1))
        if stop == 1:
            return e2
        b = self.bottleneck(self.pool(e2))
        if stop == 2:
            return b
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        if stop == 3:
            return d2
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        if stop == 4:
            return d1
        return torch.sigmoid(self.head(d1))

    def forward(self, x):
        return self._run(x)

    def features(self, x, layer: int):
        if not 0 <= layer < len(self.feature_layers):
            raise InvalidInputError(f"feature layer {layer} out of range 0..{len(self.feature_layers) - 1}")
        return self._run(x, stop=layer)


@dataclass
class SegModel:
    net: UNet
    config: SegConfig
    image_size: int
    history: list = field(default_factory=list)

    def freeze(self) -> "SegModel":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}


def _to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """``N x H x W`` (or a single ``H x W x 1``) numpy images to ``N x 1 x H x W``."""
    arr = np.asarray(images)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[None, :, :, 0]
    return torch.as_tensor(arr, dtype=dtype).unsqueeze(1)


def seg_loss(cfg: SegConfig, probs: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    if cfg.loss_mode == "focal":
        return diffops.focal_loss(probs, masks, cfg.focal)
    return diffops.dice_loss(probs, masks) + diffops.bce_loss(probs, masks)


def _check_image(model: SegModel, x) -> np.ndarray:
    x = as_image(x)
    if x.shape != (model.image_size, model.image_size, 1):
        raise InvalidInputError(f"expected a {model.image_size}x{model.image_size}x1 image, got {x.shape}")
    return x


def seg_forward(model: SegModel, x) -> np.ndarray:
    """Per-pixel skin probability for one image, as an ``H x W`` float64 array."""
    x = _check_image(model, x)
    with torch.no_grad():
        dtype = next(model.net.parameters()).dtype
        out = model.net(_to_batch(x, dtype))
    return out[0, 0].double().numpy()


def seg_forward_batch(model: SegModel, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Probabilities for an ``N x H x W`` stack."""
    dtype = next(model.net.parameters()).dtype
    outs = []
    with torch.no_grad():
        for s in range(0, len(images), chunk):
            outs.append(model.net(_to_batch(images[s:s + chunk], dtype))[:, 0].double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + images.shape[1:])


def threshold_probs(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise InvalidInputError("threshold must lie in (0, 1)")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def predict_mask(model: SegModel, x, threshold: float | None = None) -> np.ndarray:
    t = model.config.threshold if threshold is None else threshold
    return threshold_probs(seg_forward(model, x), t)


def init_seg_model(image_size: int, cfg: SegConfig = SegConfig()) -> SegModel:
    torch.manual_seed(cfg.seed)
    return SegModel(UNet(), cfg, image_size)


def _guard_source(ds: DomainDataset):
    if len(ds) == 0:
        raise InvalidInputError("training dataset is empty")
    if ds.domain != "source":
        raise InvalidInputError("models are trained on source-domain data only")


def train_seg(source: DomainDataset, cfg: SegConfig = SegConfig(), rng: np.random.Generator | None = None) -> SegModel:
    """Fit the U-Net to source images and masks with RMSprop."""
    _guard_source(source)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    images = source.image_stack()
    masks = source.mask_stack()
    model = init_seg_model(images.shape[1], cfg)
    net = model.net
    opt = torch.optim.RMSprop(net.parameters(), lr=cfg.learning_rate, alpha=cfg.rms_decay, eps=cfg.rms_eps)
    x_all = _to_batch(images)
    y_all = _to_batch(masks.astype(np.float32))
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            loss = seg_loss(cfg, net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"segmentation loss is {loss.item()} at epoch {epoch}, batch {b}", epoch, b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.history.append({"epoch": epoch, "loss": total / n})
        log.debug("seg epoch %d loss %.5f", epoch, total / n)
    return model.freeze()


def save_seg(model: SegModel, path) -> None:
    meta = {
        "architecture": {"kind": "unet3", "channels": list(model.net.channels), "feature_layers": list(UNet.feature_layers)},
        "image_size": model.image_size,
        "config": _config_dict(model.config),
        "history": model.history,
    }
    write_archive(path, SEG_FORMAT, meta, model.parameter_arrays())


def load_seg(path) -> SegModel:
    meta, arrays = read_archive(path, SEG_FORMAT)
    cfg = dict(meta["config"])
    cfg["focal"] = FocalParams(**cfg["focal"])
    net = UNet(tuple(meta["architecture"]["channels"]))
    net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return SegModel(net, SegConfig(**cfg), meta["image_size"], meta["history"]).freeze()


def _config_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    for k, v in out.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise InvalidInputError(f"non-finite config value {k}")
    return out
