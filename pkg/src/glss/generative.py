"""Edge-conditioned VAE trained on source images only.

The decoder receives the Sobel edge map of the image it is reconstructing:
edges go through a learned 1x1 projection and ``tanh`` at full resolution,
are area-averaged down to ``image_size / 2`` and concatenated with the
decoder features there. Training minimizes the reconstruction error, the
perceptual distance through a frozen segmentation network, and (for the
encoder only) the KL term to the standard normal prior.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from glss import diffops
from glss.checkpoint import read_archive, write_archive
from glss.datagen import DomainDataset
from glss.errors import InvalidInputError, TrainingDivergedError
from glss.imgmath import as_image, sobel_edges
from glss.segmentation import SegModel, UNet

log = logging.getLogger(__name__)

VAE_FORMAT = "glss-vae-v1"


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int = 64
    epochs: int = 120
    batch_size: int = 64
    learning_rate: float = 1e-4
    perceptual_weight: float = 2.0
    perceptual_layer: int = 2
    image_size: int = 64
    use_edge: bool = True
    edge_channels: int = 8
    channels: tuple[int, ...] = (32, 64, 128, 256)
    grad_clip: float = 5.0
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise InvalidInputError("latent_dim must be >= 1")
        if self.perceptual_weight < 0:
            raise InvalidInputError("perceptual_weight must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidInputError("invalid VAE training schedule")
        depth = len(self.channels)
        if self.image_size % (2**depth) or self.image_size < 2**depth:
            raise InvalidInputError(f"image_size must be a multiple of {2**depth}")
        if not 0 <= self.perceptual_layer < len(UNet.feature_layers):
            raise InvalidInputError("perceptual_layer out of range")


@dataclass
class GaussianLatent:
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if self.mu.shape != self.log_var.shape:
            raise InvalidInputError("mu and log_var differ in shape")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_var))):
            raise InvalidInputError("posterior parameters must be finite")


class Encoder(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        layers, cin = [], 1
        for c in cfg.channels:
            layers += [nn.Conv2d(cin, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = c
        self.conv = nn.Sequential(*layers)
        side = cfg.image_size // 2 ** len(cfg.channels)
        flat = cfg.channels[-1] * side * side
        self.mu = nn.Linear(flat, cfg.latent_dim)
        self.log_var = nn.Linear(flat, cfg.latent_dim)

    def forward(self, x):
        h = self.conv(x).flatten(1)
        return self.mu(h), self.log_var(h)


class Decoder(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        ch = list(cfg.channels)[::-1]
        self.side = cfg.image_size // 2 ** len(ch)
        self.ch0 = ch[0]
        self.fc = nn.Linear(cfg.latent_dim, ch[0] * self.side * self.side)
        ups = []
        for cin, cout in zip(ch[:-1], ch[1:]):
            ups += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.up = nn.Sequential(*ups)
        self.edge_proj = nn.Conv2d(1, cfg.edge_channels, 1)
        self.final_up = nn.ConvTranspose2d(ch[-1] + cfg.edge_channels, ch[-1], 4, stride=2, padding=1)
        self.out = nn.Conv2d(ch[-1], 1, 3, padding=1)

    def forward(self, z, edge):
        h = F.leaky_relu(self.fc(z), 0.2).view(-1, self.ch0, self.side, self.side)
        h = self.up(h)
        e = torch.tanh(self.edge_proj(edge))
        e = F.adaptive_avg_pool2d(e, h.shape[-2:])
        h = torch.cat([h, e], dim=1)
        h = F.leaky_relu(self.final_up(h), 0.2)
        return torch.sigmoid(self.out(h))


class VAE(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)


@dataclass
class VAEModel:
    net: VAE
    config: VAEConfig
    history: list = field(default_factory=list)

    @property
    def decoder(self) -> Decoder:
        return self.net.decoder

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def freeze(self) -> "VAEModel":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
            p.grad = None
        return self

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def edge_input(self, edge: torch.Tensor) -> torch.Tensor:
        """The decoder's edge input; zeros when the edge path is ablated."""
        return edge if self.config.use_edge else torch.zeros_like(edge)


def init_vae(cfg: VAEConfig = VAEConfig(), dtype=torch.float32) -> VAEModel:
    torch.manual_seed(cfg.seed)
    return VAEModel(VAE(cfg).to(dtype), cfg)


def _image_tensor(model: VAEModel, x) -> torch.Tensor:
    x = as_image(x)
    s = model.config.image_size
    if x.shape != (s, s, 1):
        raise InvalidInputError(f"expected a {s}x{s}x1 image, got {x.shape}")
    return torch.as_tensor(x[None, :, :, 0], dtype=model.dtype).unsqueeze(1)


def encode(model: VAEModel, x) -> GaussianLatent:
    with torch.no_grad():
        mu, lv = model.net.encoder(_image_tensor(model, x))
    return GaussianLatent(mu[0].double().numpy(), lv[0].double().numpy())


def reparameterize(g, noise):
    """``mu + exp(log_var / 2) * noise``; works on numpy arrays or torch tensors."""
    if isinstance(g, GaussianLatent):
        mu, lv = g.mu, g.log_var
    else:
        mu, lv = g
    if tuple(np.shape(noise)) != tuple(np.shape(mu)):
        raise InvalidInputError(f"noise shape {np.shape(noise)} != latent shape {np.shape(mu)}")
    if isinstance(mu, torch.Tensor):
        return mu + torch.exp(0.5 * lv) * noise
    return np.asarray(mu) + np.exp(0.5 * np.asarray(lv)) * np.asarray(noise)


def decode(model: VAEModel, z, edge) -> np.ndarray:
    """Decoder output for one latent vector, as an ``H x W x 1`` image."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.config.latent_dim,):
        raise InvalidInputError(f"z must have length {model.config.latent_dim}, got shape {z.shape}")
    e = _image_tensor(model, edge)
    with torch.no_grad():
        out = model.decoder(torch.as_tensor(z[None], dtype=model.dtype), model.edge_input(e))
    return out[0, 0].double().numpy()[:, :, None]


def edge_batch(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Sobel edge maps for an ``N x H x W`` stack as ``N x 1 x H x W``."""
    edges = np.stack([sobel_edges(im)[:, :, 0] for im in images]) if len(images) else images
    return torch.as_tensor(edges, dtype=dtype).unsqueeze(1)


def perceptual_features(seg_model: SegModel, x: torch.Tensor, layer: int) -> torch.Tensor:
    """Activations of ``layer`` of the frozen segmentation network.

    Gradients reach ``x`` but never the segmentation parameters.
    """
    if any(p.requires_grad for p in seg_model.net.parameters()):
        seg_model.freeze()
    return seg_model.net.features(x, layer)


def _per_image_sse(a, b):
    return ((a - b) ** 2).flatten(1).sum(dim=1)


def vae_losses(model: VAEModel, x, x_hat, g, seg_model: SegModel | None, cfg: VAEConfig):
    """Encoder objective ``L_g``, decoder objective ``L_h`` and their parts.

    ``x`` and ``x_hat`` are ``N x 1 x H x W`` tensors and ``g`` a
    ``(mu, log_var)`` pair of ``N x d`` tensors. Reconstruction and
    perceptual terms are per-image squared-error sums averaged over the batch;
    the perceptual term carries the weight ``cfg.perceptual_weight``.
    """
    mu, log_var = g
    l_r = _per_image_sse(x, x_hat).mean()
    if cfg.perceptual_weight > 0 and seg_model is not None:
        with torch.no_grad():
            fx = perceptual_features(seg_model, x.to(_seg_dtype(seg_model)), cfg.perceptual_layer)
        fh = perceptual_features(seg_model, x_hat.to(_seg_dtype(seg_model)), cfg.perceptual_layer)
        l_p = _per_image_sse(fx, fh).mean().to(x.dtype)
    else:
        l_p = torch.zeros((), dtype=x.dtype)
    kl = diffops.kl_diag_gaussian(mu, log_var).mean()
    l_h = l_r + cfg.perceptual_weight * l_p
    l_g = l_h + kl
    return l_g, l_h, {"L_r": l_r, "L_p": l_p, "KL": kl}


def _seg_dtype(seg_model):
    return next(seg_model.net.parameters()).dtype


def _clip(params, max_norm):
    if max_norm and max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def vae_step(model: VAEModel, x, edge, noise, seg_model, opt, cfg: VAEConfig) -> dict:
    """One asymmetric update: encoder by grad of L_g, decoder by grad of L_h.

    KL depends only on encoder outputs, so a single backward pass of ``L_g``
    yields ``grad L_h`` for the decoder exactly. Clipping is applied per
    network so a large KL gradient cannot rescale the decoder update.
    """
    mu, lv = model.net.encoder(x)
    z = reparameterize((mu, lv), noise)
    x_hat = model.decoder(z, model.edge_input(edge))
    l_g, l_h, parts = vae_losses(model, x, x_hat, (mu, lv), seg_model, cfg)
    opt.zero_grad(set_to_none=True)
    l_g.backward()
    _clip(list(model.net.encoder.parameters()), cfg.grad_clip)
    _clip(list(model.net.decoder.parameters()), cfg.grad_clip)
    opt.step()
    return {"L_g": l_g.item(), "L_h": l_h.item(), **{k: v.item() for k, v in parts.items()}}


def make_optimizer(model: VAEModel, cfg: VAEConfig):
    return torch.optim.RMSprop(model.net.parameters(), lr=cfg.learning_rate, alpha=cfg.rms_decay, eps=cfg.rms_eps)


def train_vae(source: DomainDataset, seg_model: SegModel | None, cfg: VAEConfig = VAEConfig(),
              rng: np.random.Generator | None = None) -> VAEModel:
    """Train on source images (masks are never read)."""
    if len(source) == 0:
        raise InvalidInputError("training dataset is empty")
    if source.domain != "source":
        raise InvalidInputError("models are trained on source-domain data only")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    model = init_vae(cfg)
    if cfg.epochs == 0:
        return model.freeze()
    images = source.image_stack()
    if images.shape[1:] != (cfg.image_size, cfg.image_size):
        raise InvalidInputError(f"source images are {images.shape[1:]}, config expects {cfg.image_size}")
    if seg_model is not None:
        seg_model.freeze()
    x_all = torch.as_tensor(images, dtype=torch.float32).unsqueeze(1)
    e_all = edge_batch(images)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    model.net.train()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            noise = torch.randn(len(idx), cfg.latent_dim, generator=gen)
            stats = vae_step(model, x_all[idx], e_all[idx], noise, seg_model, opt, cfg)
            if not all(np.isfinite(v) for v in stats.values()):
                raise TrainingDivergedError(f"VAE loss is not finite at epoch {epoch}, batch {b}: {stats}", epoch, b)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        model.history.append({"epoch": epoch, **{k: v / n for k, v in sums.items()}})
        log.debug("vae epoch %d %s", epoch, model.history[-1])
    return model.freeze()


def reconstruct(model: VAEModel, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Encode -> decode at the posterior mean, ``N x H x W`` in and out."""
    outs = []
    with torch.no_grad():
        for s in range(0, len(images), chunk):
            x = torch.as_tensor(images[s:s + chunk], dtype=model.dtype).unsqueeze(1)
            mu, _ = model.net.encoder(x)
            e = model.edge_input(edge_batch(images[s:s + chunk], model.dtype))
            outs.append(model.decoder(mu, e)[:, 0].double().numpy())
    return np.concatenate(outs) if outs else np.zeros_like(images)


def sample_prior(model: VAEModel, edges: torch.Tensor, generator: torch.Generator) -> np.ndarray:
    z = torch.randn(len(edges), model.config.latent_dim, generator=generator, dtype=model.dtype)
    with torch.no_grad():
        return model.decoder(z, model.edge_input(edges))[:, 0].double().numpy()


def save_vae(model: VAEModel, path) -> None:
    cfg = dataclasses.asdict(model.config)
    cfg["channels"] = list(cfg["channels"])
    meta = {
        "architecture": {
            "encoder": [[1, c] for c in model.config.channels],
            "edge_concat_side": model.config.image_size // 2,
            "state_shapes": {k: list(v.shape) for k, v in model.net.state_dict().items()},
        },
        "dtype": str(model.dtype).replace("torch.", ""),
        "config": cfg,
        "history": model.history,
    }
    write_archive(path, VAE_FORMAT, meta, model.parameter_arrays())


def load_vae(path) -> VAEModel:
    meta, arrays = read_archive(path, VAE_FORMAT)
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    cfg = VAEConfig(**cfg)
    net = VAE(cfg).to(getattr(torch, meta["dtype"]))
    net.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return VAEModel(net, cfg, meta["history"]).freeze()
