"""Latent search: find the decoder output closest to a target image.

The decoder is frozen. Starting from a prior draw, ``z`` is moved by
bias-corrected Adam steps on ``metric(target, decode(z, sobel(target)))``.
The best iterate seen (not the last) is kept, and its decoded image, the
nearest clone, is what the segmentation network sees.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from glss import diffops
from glss.errors import InvalidInputError, NumericError, SearchDivergedError
from glss.generative import VAEModel
from glss.imgmath import SSIMParams, as_image, sobel_edges
from glss.segmentation import SegModel, predict_mask

WORKERS_ENV = "GLSS_WORKERS"
TRACE_FIELDS = ("image_id", "restart_index", "initial_loss", "final_loss", "losses", "z_norm", "wall_time_ms")


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 100
    step_size: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    metric: str = "ssim"
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.step_size <= 0 or self.epsilon <= 0:
            raise InvalidInputError("step_size and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("beta1 and beta2 must lie in [0, 1)")
        if self.metric not in diffops.METRICS:
            raise InvalidInputError(f"metric must be one of {sorted(diffops.METRICS)}")
        if self.restarts < 1:
            raise InvalidInputError("restarts must be >= 1")


@dataclass
class SearchResult:
    z_opt: np.ndarray
    clone: np.ndarray
    trajectory: list[tuple[int, float]]
    initial_loss: float
    final_loss: float
    restart_index: int = 0
    best_iteration: int = 0
    wall_time_ms: float = 0.0
    image_id: str = ""
    # best-so-far latent after evaluating iteration k, for requested k only
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def z_norm(self) -> float:
        return float(np.linalg.norm(self.z_opt))

    @property
    def losses(self) -> list[float]:
        return [loss for _, loss in self.trajectory]

    def trace_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "restart_index": self.restart_index,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "losses": self.losses,
            "z_norm": self.z_norm,
            "wall_time_ms": self.wall_time_ms,
        }


@contextmanager
def single_thread():
    """Pin torch to one intra-op thread so serial and pooled runs agree bit-for-bit."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def init_latent(dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(dim)


def _target_tensors(model: VAEModel, target, edge=None):
    target = as_image(target)
    s = model.config.image_size
    if target.shape != (s, s, 1):
        raise InvalidInputError(f"target must be {s}x{s}x1, got {target.shape}")
    edge = sobel_edges(target) if edge is None else as_image(edge)
    dt = model.dtype
    t = torch.as_tensor(target[None, :, :, 0], dtype=dt).unsqueeze(1)
    e = torch.as_tensor(edge[None, :, :, 0], dtype=dt).unsqueeze(1)
    return t, model.edge_input(e)


def _metric_fn(metric: str, ssim_params: SSIMParams | None = None):
    if metric == "ssim" and ssim_params is not None:
        return lambda a, b: diffops.ssim_loss_per_image(a, b, ssim_params)
    return diffops.METRICS[metric]


def _loss_and_grad(model: VAEModel, z: torch.Tensor, t, e, metric, need_grad: bool = True):
    fn = _metric_fn(metric) if isinstance(metric, str) else metric
    z = z.detach().requires_grad_(need_grad)
    with torch.set_grad_enabled(need_grad):
        loss = fn(t, model.decoder(z[None], e))[0]
    if need_grad:
        (grad,) = torch.autograd.grad(loss, z)
        return loss.detach(), grad
    return loss.detach(), None


def search_objective(model: VAEModel, z, target, edge=None, metric: str = "ssim",
                     ssim_params: SSIMParams | None = None) -> tuple[float, np.ndarray]:
    """Metric value at ``z`` and its exact gradient with respect to ``z``.

    ``ssim_params`` replaces the default SSIM settings (e.g. a smaller window
    for images under 11 pixels).
    """
    if metric not in diffops.METRICS:
        raise InvalidInputError(f"unknown metric {metric!r}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.config.latent_dim,):
        raise InvalidInputError(f"z must have length {model.config.latent_dim}")
    t, e = _target_tensors(model, target, edge)
    loss, grad = _loss_and_grad(model, torch.as_tensor(z, dtype=model.dtype), t, e, _metric_fn(metric, ssim_params))
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite objective at |z|={np.linalg.norm(z):.3g}", z_norm=float(np.linalg.norm(z)))
    return float(loss), grad.double().numpy()


def _adam_run(model, z0, t, e, cfg: SearchConfig, snapshots=()):
    z = torch.as_tensor(z0, dtype=model.dtype).clone()
    m = torch.zeros_like(z)
    v = torch.zeros_like(z)
    traj = []
    best = (math.inf, 0, z.clone())
    first = None
    above = 0
    snaps = {}
    for it in range(cfg.iterations + 1):
        last = it == cfg.iterations
        loss, grad = _loss_and_grad(model, z, t, e, cfg.metric, need_grad=not last)
        val = float(loss)
        if not math.isfinite(val):
            raise NumericError(
                f"non-finite search loss at iteration {it}, |z|={float(z.norm()):.4g}",
                iteration=it, z_norm=float(z.norm()),
            )
        traj.append((it, val))
        if first is None:
            first = val
        if val < best[0]:
            best = (val, it, z.clone())
        if it in snapshots:
            snaps[it] = best[2].double().numpy()
        above = above + 1 if val > 10.0 * first else 0
        if above >= 10:
            raise SearchDivergedError(f"search diverged at iteration {it}", traj)
        if last:
            break
        step = it + 1
        m.mul_(cfg.beta1).add_(grad, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(grad, grad, value=1.0 - cfg.beta2)
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        z = z - cfg.step_size * m_hat / (v_hat.sqrt() + cfg.epsilon)
    return traj, first, best, snaps


def _decode_clone(model, z: torch.Tensor, e) -> np.ndarray:
    with torch.no_grad():
        clone = model.decoder(z[None], e)[0, 0].double().numpy()[:, :, None]
    return np.clip(clone, 0.0, 1.0)


def clone_from_latent(model: VAEModel, z, target, edge=None) -> np.ndarray:
    """Decode a stored latent against ``target``'s edges exactly as the search does."""
    _, e = _target_tensors(model, target, edge)
    return _decode_clone(model, torch.as_tensor(np.asarray(z, dtype=np.float64), dtype=model.dtype), e)


def latent_search(model: VAEModel, target, cfg: SearchConfig = SearchConfig(),
                  rng: np.random.Generator | None = None, edge=None, image_id: str = "",
                  snapshots=()) -> SearchResult:
    """Search the latent space for the nearest clone of ``target``.

    ``edge`` defaults to the Sobel map of ``target`` and stays fixed.
    ``snapshots`` lists iterations at which to record the best-so-far latent.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    t0 = time.perf_counter()
    t, e = _target_tensors(model, target, edge)
    chosen = None
    for r in range(cfg.restarts):
        z0 = init_latent(model.config.latent_dim, rng)
        traj, first, best, snaps = _adam_run(model, z0, t, e, cfg, frozenset(snapshots))
        if chosen is None or best[0] < chosen[2][0]:
            chosen = (r, traj, best, first, snaps)
    r, traj, (best_loss, best_it, z_best), first, snaps = chosen
    return SearchResult(
        z_opt=z_best.double().numpy(),
        clone=_decode_clone(model, z_best, e),
        trajectory=traj,
        initial_loss=first,
        final_loss=best_loss,
        restart_index=r,
        best_iteration=best_it,
        wall_time_ms=(time.perf_counter() - t0) * 1000.0,
        image_id=image_id,
        snapshots=snaps,
    )


def glss_predict(model: VAEModel, seg_model: SegModel, target, cfg: SearchConfig = SearchConfig(),
                 rng: np.random.Generator | None = None, image_id: str = "") -> tuple[np.ndarray, SearchResult]:
    """Mask for ``target`` predicted on its nearest clone. The target itself never reaches ``seg_model``."""
    res = latent_search(model, target, cfg, rng, image_id=image_id)
    return predict_mask(seg_model, res.clone), res


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image generator, independent of scheduling order."""
    return np.random.default_rng([seed, index])


def resolve_workers(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV, "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


_POOL_STATE: dict = {}


def _pool_init(model, cfg, snapshots):
    torch.set_num_threads(1)
    _POOL_STATE.update(model=model, cfg=cfg, snapshots=snapshots)


def _pool_search(args):
    index, target, image_id = args
    cfg = _POOL_STATE["cfg"]
    return latent_search(_POOL_STATE["model"], target, cfg, image_rng(cfg.seed, index), image_id=image_id,
                         snapshots=_POOL_STATE["snapshots"])


def search_many(model: VAEModel, targets, cfg: SearchConfig = SearchConfig(), ids=None,
                workers: int | None = None, snapshots=()) -> list[SearchResult]:
    """Independent searches over ``targets``; parallel and serial runs return identical results."""
    ids = [f"{i}" for i in range(len(targets))] if ids is None else list(ids)
    jobs = [(i, targets[i], ids[i]) for i in range(len(targets))]
    n_workers = min(resolve_workers(workers), max(1, len(jobs)))
    if n_workers == 1:
        with single_thread():
            return [latent_search(model, tg, cfg, image_rng(cfg.seed, i), image_id=ident, snapshots=snapshots)
                    for i, tg, ident in jobs]
    with ProcessPoolExecutor(n_workers, initializer=_pool_init, initargs=(model, cfg, tuple(snapshots))) as pool:
        return list(pool.map(_pool_search, jobs, chunksize=max(1, len(jobs) // (4 * n_workers))))


def write_traces(path, results: list[SearchResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.trace_record()) + "\n")


def read_traces(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
