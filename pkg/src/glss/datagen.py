"""Synthetic paired-domain benchmark and the on-disk dataset format.

Source scenes imitate a red-channel view: smooth "skin" blobs that are on
average brighter than a textured, cluttered background. Target scenes are
fresh scenes pushed through a photometric shift (gamma, offset, blur, sensor
noise) that leaves geometry, and therefore masks, untouched.

Directory layout::

    <root>/images/<id>.png   8-bit grayscale
    <root>/masks/<id>.png    8-bit grayscale, values exactly {0, 255}
    <root>/manifest.tsv      optional: id, domain, split
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from glss.errors import InvalidInputError, MalformedDatasetError

log = logging.getLogger(__name__)

SHAPES = ("ellipse", "capsule", "polygon")
DOMAINS = ("source", "target")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DomainShift:
    gamma: float = 1.0
    offset: float = 0.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidInputError("shift gamma must be positive")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise InvalidInputError("blur_sigma and noise_std must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1.0 and self.offset == 0.0 and self.blur_sigma == 0.0 and self.noise_std == 0.0


DEFAULT_TARGET_SHIFT = DomainShift(gamma=2.2, offset=0.05, blur_sigma=0.8, noise_std=0.03)


@dataclass(frozen=True)
class SynthConfig:
    n_source_train: int = 400
    n_source_test: int = 100
    n_target_test: int = 100
    image_size: int = 64
    shapes: tuple[str, ...] = SHAPES
    skin_intensity: tuple[float, float] = (0.55, 0.85)
    background_intensity: tuple[float, float] = (0.15, 0.6)
    texture_amplitude: float = 0.08
    clutter: int = 2
    target_shift: DomainShift = DEFAULT_TARGET_SHIFT
    seed: int = 0

    def __post_init__(self):
        if not self.shapes:
            raise InvalidInputError("shape palette is empty")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise InvalidInputError(f"unknown shapes: {sorted(unknown)}")
        for n in (self.n_source_train, self.n_source_test, self.n_target_test):
            if n < 0:
                raise InvalidInputError("split sizes must be non-negative")
        if self.image_size < 16:
            raise InvalidInputError("image_size must be at least 16")
        lo_s, hi_s = self.skin_intensity
        lo_b, hi_b = self.background_intensity
        if not (0 <= lo_s < hi_s <= 1 and 0 <= lo_b < hi_b <= 1):
            raise InvalidInputError("intensity ranges must be sub-intervals of [0, 1]")
        if not (lo_b < hi_s and lo_s < hi_b):
            raise InvalidInputError("skin and background intensity ranges must overlap")
        if self.target_shift.is_identity:
            raise InvalidInputError("target_shift must not be the identity")


class DomainDataset:
    """Ordered (image, mask, id) triples with counted accessors.

    ``reads`` counts every image and mask access so callers can prove which
    stages touched which data.
    """

    def __init__(self, images, masks, ids, domain="source", split="train"):
        if domain not in DOMAINS:
            raise InvalidInputError(f"domain must be one of {DOMAINS}")
        if split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}")
        if not (len(images) == len(masks) == len(ids)):
            raise InvalidInputError("images, masks and ids differ in length")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("dataset ids must be unique")
        for img, m, i in zip(images, masks, ids):
            if img.ndim != 3 or img.shape[2] != 1:
                raise InvalidInputError(f"{i}: images must be single-channel H x W x 1")
            if m.shape != img.shape[:2]:
                raise InvalidInputError(f"{i}: mask shape {m.shape} != image shape {img.shape[:2]}")
        self._images = [np.asarray(a, dtype=np.float64) for a in images]
        self._masks = [np.asarray(m, dtype=np.uint8) for m in masks]
        self.ids = list(ids)
        self.domain = domain
        self.split = split
        self.reads = Counter()

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        return f"DomainDataset({self.domain}/{self.split}, n={len(self)})"

    def image(self, i: int) -> np.ndarray:
        self.reads["image"] += 1
        return self._images[i]

    def mask(self, i: int) -> np.ndarray:
        self.reads["mask"] += 1
        return self._masks[i]

    def image_stack(self, idx=None) -> np.ndarray:
        """Images as an ``N x H x W`` float array (counted as N reads)."""
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.image(i)[:, :, 0] for i in idx]) if len(self) else np.zeros((0, 0, 0))

    def mask_stack(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.mask(i) for i in idx]) if len(self) else np.zeros((0, 0, 0), np.uint8)

    def content_hash(self) -> str:
        """Digest of ids, images and masks. Not counted as a read."""
        h = hashlib.sha256()
        for i, img, m in zip(self.ids, self._images, self._masks):
            h.update(i.encode())
            h.update(np.ascontiguousarray(img).tobytes())
            h.update(np.ascontiguousarray(m).tobytes())
        return h.hexdigest()

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.ids == other.ids
            and self.domain == other.domain
            and self.split == other.split
            and all(np.array_equal(a, b) for a, b in zip(self._images, other._images))
            and all(np.array_equal(a, b) for a, b in zip(self._masks, other._masks))
        )


# --- scene rendering -------------------------------------------------------

def _ellipse_sd(yy, xx, rng, size):
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    a, b = rng.uniform(0.14 * size, 0.32 * size, 2)
    th = rng.uniform(0, math.pi)
    u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
    v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
    # first-order distance to the ellipse boundary
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return (r - 1.0) * min(a, b)


def _capsule_sd(yy, xx, rng, size):
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    length = rng.uniform(0.25 * size, 0.55 * size)
    th = rng.uniform(0, math.pi)
    rad = rng.uniform(0.09 * size, 0.16 * size)
    dy, dx = 0.5 * length * math.sin(th), 0.5 * length * math.cos(th)
    ay, ax, by, bx = cy - dy, cx - dx, cy + dy, cx + dx
    py, px = yy - ay, xx - ax
    vy, vx = by - ay, bx - ax
    t = np.clip((py * vy + px * vx) / (vy * vy + vx * vx), 0.0, 1.0)
    return np.hypot(py - t * vy, px - t * vx) - rad


def _polygon_sd(yy, xx, rng, size):
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    n = int(rng.integers(5, 8))
    angles = rng.uniform(0, 2 * math.pi) + (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * (2 * math.pi / n)
    radii = rng.uniform(0.16 * size, 0.3 * size, n)
    hull = _convex_hull(np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1))
    mx, my = np.mean(hull, axis=0)
    sd = np.full(yy.shape, -np.inf)
    for k in range(len(hull)):
        (x0, y0), (x1, y1) = hull[k], hull[(k + 1) % len(hull)]
        ex, ey = x1 - x0, y1 - y0
        norm = math.hypot(ex, ey)
        nx, ny = ey / norm, -ex / norm
        if nx * (mx - x0) + ny * (my - y0) > 0:
            nx, ny = -nx, -ny
        sd = np.maximum(sd, (xx - x0) * nx + (yy - y0) * ny)
    return sd


def _convex_hull(pts):
    pts = sorted(map(tuple, pts))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


_SHAPE_SD = {"ellipse": _ellipse_sd, "capsule": _capsule_sd, "polygon": _polygon_sd}


def _smooth_field(rng, size, cells):
    coarse = rng.standard_normal((cells, cells))
    f = zoom(coarse, size / cells, order=3, mode="reflect")[:size, :size]
    return f / (np.abs(f).max() + 1e-12)


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one source-domain scene: ``(H x W x 1 image, H x W mask)``."""
    if not cfg.shapes:
        raise InvalidInputError("shape palette is empty")
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    lo_b, hi_b = cfg.background_intensity
    bg_level = rng.uniform(lo_b, 0.5 * (lo_b + hi_b))
    bg = bg_level + cfg.texture_amplitude * _smooth_field(rng, s, 6)
    bg += 0.5 * cfg.texture_amplitude * _smooth_field(rng, s, 16)
    # non-skin clutter whose intensity overlaps the skin range
    for _ in range(int(rng.integers(0, cfg.clutter + 1))):
        y0, x0 = rng.integers(0, s - 8, 2)
        h, w = rng.integers(4, s // 3, 2)
        level = rng.uniform(0.5 * (lo_b + hi_b), hi_b)
        sd = np.maximum(np.maximum(y0 - yy, yy - (y0 + h)), np.maximum(x0 - xx, xx - (x0 + w)))
        cov = np.clip(0.5 - sd, 0.0, 1.0)
        bg = bg * (1 - cov) + level * cov

    img = bg
    mask = np.zeros((s, s), dtype=bool)
    lo_s, hi_s = cfg.skin_intensity
    for _ in range(int(rng.integers(1, 4))):
        shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
        sd = _SHAPE_SD[shape](yy, xx, rng, s)
        cov = np.clip(0.5 - sd, 0.0, 1.0)
        gy, gx = rng.uniform(-0.004, 0.004, 2)
        skin = rng.uniform(lo_s, hi_s) + gy * (yy - s / 2) + gx * (xx - s / 2)
        skin = skin + 0.3 * cfg.texture_amplitude * _smooth_field(rng, s, 8)
        img = img * (1 - cov) + skin * cov
        mask |= sd < 0
    img = img + rng.normal(0.0, 0.01, img.shape)
    if not mask.any() or mask.all():
        # keep both classes present; re-render deterministically from rng
        return generate_scene(cfg, rng)
    return _quantize(img)[:, :, None], mask.astype(np.uint8)


def apply_domain_shift(img: np.ndarray, shift: DomainShift, rng: np.random.Generator | None = None) -> np.ndarray:
    """Photometric remap, blur and noise; geometry is left untouched."""
    if shift.is_identity:
        return img
    out = np.asarray(img, dtype=np.float64) ** shift.gamma + shift.offset
    if shift.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(shift.blur_sigma, shift.blur_sigma, 0)[: out.ndim], mode="nearest")
    if shift.noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        out = out + rng.normal(0.0, shift.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0)


_SPLIT_KEYS = {"source_train": 1, "source_test": 2, "target_test": 3}


def _render_split(cfg: SynthConfig, name: str, n: int) -> DomainDataset:
    domain, split = name.split("_")
    prefix = {"source": "src", "target": "tgt"}[domain]
    images, masks, ids = [], [], []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, _SPLIT_KEYS[name], i])
        img, m = generate_scene(cfg, rng)
        if domain == "target":
            img = _quantize(apply_domain_shift(img, cfg.target_shift, rng))
        images.append(img)
        masks.append(m)
        ids.append(f"{prefix}-{split}-{i:04d}")
    return DomainDataset(images, masks, ids, domain=domain, split=split)


def build_benchmark(cfg: SynthConfig) -> dict[str, DomainDataset]:
    """Source train/test and target test splits. No target training data is made."""
    return {
        "source_train": _render_split(cfg, "source_train", cfg.n_source_train),
        "source_test": _render_split(cfg, "source_test", cfg.n_source_test),
        "target_test": _render_split(cfg, "target_test", cfg.n_target_test),
    }


# --- directory IO ----------------------------------------------------------

def save_dataset(ds: DomainDataset, dir_path) -> None:
    root = Path(dir_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, ident in enumerate(ds.ids):
        img = np.round(ds._images[i][:, :, 0] * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(root / "images" / f"{ident}.png", optimize=False)
        Image.fromarray(ds._masks[i] * 255, mode="L").save(root / "masks" / f"{ident}.png", optimize=False)
    with open(root / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "domain", "split"])
        for ident in ds.ids:
            w.writerow([ident, ds.domain, ds.split])


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise InvalidInputError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def load_dataset(dir_path, domain: str | None = None, split: str | None = None) -> DomainDataset:
    root = Path(dir_path)
    img_dir = root / "images"
    paths = sorted(img_dir.glob("*.png")) if img_dir.is_dir() else []
    tags = {}
    manifest = root / "manifest.tsv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                tags[row["id"]] = (row.get("domain", "source"), row.get("split", "train"))
    if not paths:
        log.warning("no images found under %s; returning an empty dataset", root)
    images, masks, ids = [], [], []
    for p in paths:
        ident = p.stem
        mpath = root / "masks" / p.name
        if not mpath.exists():
            raise MalformedDatasetError(f"missing mask for image {p.name}: expected {mpath}")
        img = _read_gray(p)
        m = _read_gray(mpath)
        if not np.all((m == 0) | (m == 255)):
            raise MalformedDatasetError(f"{mpath.name}: mask values must be exactly 0 or 255")
        if m.shape != img.shape:
            raise MalformedDatasetError(f"{mpath.name}: mask shape {m.shape} != image shape {img.shape}")
        images.append((img.astype(np.float64) / 255.0)[:, :, None])
        masks.append((m // 255).astype(np.uint8))
        ids.append(ident)
    if domain is None or split is None:
        first = tags.get(ids[0]) if ids else None
        d, s = first if first else ("source", "train")
        domain = domain or d
        split = split or s
    return DomainDataset(images, masks, ids, domain=domain, split=split)
