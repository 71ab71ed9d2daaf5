"""End-to-end runs: data, training, target evaluation and reports.

Three evaluation modes cover the ablation table:

* ``source-only`` (every flag off): the segmentation network sees the target.
* ``reconstruction`` (search off): it sees the VAE's encode/decode of the target.
* ``search``: it sees the nearest clone found by latent search.

Reports are written with ``repr`` floats so that ``eval`` can compare them
byte for byte. Wall times go to ``timing.tsv`` and never into a report.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from glss import imgmath
from glss.checkpoint import read_archive, write_archive
from glss.datagen import DomainDataset, build_benchmark, load_dataset, save_dataset
from glss.errors import CheckpointError, GLSSError, StageError
from glss.generative import VAEModel, load_vae, reconstruct, save_vae, train_vae
from glss.harness.config import ExperimentConfig, dump_config, fingerprint, flatten
from glss.latent_search import (
    SearchResult, clone_from_latent, read_traces, search_many, single_thread, write_traces,
)
from glss.segmentation import SegModel, load_seg, save_seg, seg_forward_batch, threshold_probs, train_seg

log = logging.getLogger("glss.harness")

SPLITS = ("source_train", "source_test", "target_test")
LATENT_FORMAT = "glss-latents-v1"
# row order of the published ablation table
ABLATION_ORDER = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1))


# --- reports ----------------------------------------------------------------

def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(fmt(row[h]) for h in header) + "\n")


def read_tsv(path) -> list[dict[str, str]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]


@dataclass
class ImageRow:
    image_id: str
    iou: float
    dice: float
    final_loss: float | None = None


@dataclass
class MetricsReport:
    rows: list[ImageRow]
    fingerprint: str
    mode: str
    flags: str
    source_only_mean_iou: float
    wall_times: dict[str, float] = field(default_factory=dict)

    @property
    def ious(self) -> np.ndarray:
        return np.array([r.iou for r in self.rows])

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.rows else float("nan")

    @property
    def median_iou(self) -> float:
        return float(np.median(self.ious)) if self.rows else float("nan")

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_final_loss(self) -> float | None:
        losses = [r.final_loss for r in self.rows if r.final_loss is not None]
        return float(np.mean(losses)) if losses else None

    def aggregates(self) -> dict[str, object]:
        return {
            "fingerprint": self.fingerprint,
            "mode": self.mode,
            "flags": self.flags,
            "n_images": len(self.rows),
            "mean_iou": self.mean_iou,
            "median_iou": self.median_iou,
            "mean_dice": self.mean_dice,
            "source_only_mean_iou": self.source_only_mean_iou,
            "mean_final_loss": self.mean_final_loss,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        header = ("image_id", "iou", "dice", "final_loss", "fingerprint")
        write_tsv(out / "report.tsv", header, [
            {"image_id": r.image_id, "iou": r.iou, "dice": r.dice, "final_loss": r.final_loss,
             "fingerprint": self.fingerprint} for r in self.rows
        ])
        write_tsv(out / "summary.tsv", ("key", "value"),
                  [{"key": k, "value": v} for k, v in self.aggregates().items()])
        if self.wall_times:
            write_tsv(out / "timing.tsv", ("stage", "seconds"),
                      [{"stage": k, "seconds": v} for k, v in self.wall_times.items()])


def read_summary(path) -> dict[str, str]:
    return {r["key"]: r["value"] for r in read_tsv(path)}


# --- artifact layout ------------------------------------------------------------

def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\0")
    return h.hexdigest()[:12]


def _section(cfg: ExperimentConfig, *prefixes) -> str:
    flat = flatten(cfg.resolved())
    return "\n".join(f"{k}={fmt(v)}" for k, v in sorted(flat.items()) if k.startswith(prefixes))


@dataclass(frozen=True)
class Layout:
    root: Path
    shared: Path | None = None  # where data and checkpoints live, if not under ``root``

    @property
    def base(self) -> Path:
        return self.root if self.shared is None else self.shared

    @property
    def data(self) -> Path:
        return self.base / "data"

    @property
    def checkpoints(self) -> Path:
        return self.base / "checkpoints"

    def seg(self, cfg: ExperimentConfig, data_hash: str) -> Path:
        key = _digest(data_hash, _section(cfg, "seg."), cfg.global_seed)
        return self.checkpoints / f"seg-{key}.zip"

    def vae(self, cfg: ExperimentConfig, data_hash: str) -> Path:
        f = cfg.flags
        key = _digest(data_hash, _section(cfg, "seg.", "vae."), cfg.global_seed, f.use_edge, f.use_perceptual)
        return self.checkpoints / f"vae-edge{int(f.use_edge)}-perc{int(f.use_perceptual)}-{key}.zip"


def evaluation_mode(cfg: ExperimentConfig) -> str:
    f = cfg.flags
    if not (f.use_edge or f.use_perceptual or f.use_search):
        return "source-only"
    return "search" if f.use_search else "reconstruction"


# --- stages ------------------------------------------------------------------

class _Stage:
    """Times a stage and re-raises failures as ``StageError`` naming it."""

    def __init__(self, name, times):
        self.name, self.times = name, times

    def __enter__(self):
        log.info("stage %s", self.name)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, exc, tb):
        self.times[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(f"stage {self.name} failed: {exc}", self.name) from exc
        return False


def load_benchmark(cfg: ExperimentConfig, data_dir=None) -> dict[str, DomainDataset]:
    """Datasets from ``data_dir`` when it holds all three splits, else generated in memory."""
    if data_dir is not None:
        d = Path(data_dir)
        if all((d / s / "images").is_dir() for s in SPLITS):
            return {
                s: load_dataset(d / s, domain=s.split("_")[0], split=s.split("_")[1]) for s in SPLITS
            }
    return build_benchmark(cfg.resolved().synth)


def write_benchmark(bench: dict[str, DomainDataset], data_dir) -> None:
    for s in SPLITS:
        save_dataset(bench[s], Path(data_dir) / s)


def obtain_seg(cfg, bench, layout: Layout, train: bool = True) -> tuple[SegModel, Path]:
    r = cfg.resolved()
    path = layout.seg(cfg, bench["source_train"].content_hash())
    if path.exists():
        return load_seg(path), path
    if not train:
        raise CheckpointError(f"segmentation checkpoint not found: {path}")
    model = train_seg(bench["source_train"], r.seg, np.random.default_rng([r.global_seed, 11]))
    save_seg(model, path)
    return model, path


def obtain_vae(cfg, bench, seg: SegModel, layout: Layout, train: bool = True) -> tuple[VAEModel, Path]:
    r = cfg.resolved()
    path = layout.vae(cfg, bench["source_train"].content_hash())
    if path.exists():
        return load_vae(path), path
    if not train:
        raise CheckpointError(f"VAE checkpoint not found: {path}")
    model = train_vae(bench["source_train"], seg, r.vae, np.random.default_rng([r.global_seed, 12]))
    save_vae(model, path)
    return model, path


def _masks(seg: SegModel, images: np.ndarray) -> np.ndarray:
    return threshold_probs(seg_forward_batch(seg, images), seg.config.threshold)


def _score(masks, target: DomainDataset) -> list[tuple[float, float]]:
    return [(imgmath.iou(m, target.mask(i)), imgmath.dice(m, target.mask(i))) for i, m in enumerate(masks)]


def save_latents(path, results: list[SearchResult]) -> None:
    z = np.stack([r.z_opt for r in results]) if results else np.zeros((0, 0))
    write_archive(path, LATENT_FORMAT, {"ids": [r.image_id for r in results]}, {"z_opt": z})


def load_latents(path) -> tuple[list[str], np.ndarray]:
    meta, arrays = read_archive(path, LATENT_FORMAT)
    return meta["ids"], arrays["z_opt"]


def run_pipeline(cfg: ExperimentConfig, train: bool = True, data_dir=None, probe=None,
                 bench: dict[str, DomainDataset] | None = None, layout: Layout | None = None) -> MetricsReport:
    """Train (or load) both models, evaluate the target test split and write the reports.

    ``probe(stage, bench)`` is called on entry to every stage; tests use it to
    inspect the dataset read counters.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = layout or Layout(out)
    (out / "resolved.cfg").write_text(dump_config(cfg))
    fp = fingerprint(cfg)
    mode = evaluation_mode(cfg)
    times: dict[str, float] = {}
    probe = probe or (lambda stage, b: None)
    log.info("run %s mode=%s fingerprint=%s", cfg.flags.tag, mode, fp)

    with _Stage("data", times):
        if bench is None:
            bench = load_benchmark(cfg, layout.data if data_dir is None else data_dir)
        probe("data", bench)
    target = bench["target_test"]

    with _Stage("train-seg", times):
        probe("train-seg", bench)
        seg, _ = obtain_seg(cfg, bench, layout, train)
    vae = None
    if mode != "source-only":
        with _Stage("train-vae", times):
            probe("train-vae", bench)
            vae, _ = obtain_vae(cfg, bench, seg, layout, train)

    with _Stage("evaluate", times):
        probe("evaluate", bench)
        images = target.image_stack()
        baseline = _masks(seg, images)
        losses = [None] * len(target)
        if mode == "source-only":
            masks = baseline
        elif mode == "reconstruction":
            masks = _masks(seg, np.clip(reconstruct(vae, images), 0.0, 1.0))
        else:
            results = search_many(vae, [im[:, :, None] for im in images], cfg.resolved().search,
                                  ids=target.ids, workers=cfg.workers or None)
            write_traces(out / "traces.jsonl", results)
            save_latents(out / "latents.zip", results)
            masks = _masks(seg, np.stack([r.clone[:, :, 0] for r in results]))
            losses = [r.final_loss for r in results]

    with _Stage("metrics", times):
        probe("metrics", bench)
        scores = _score(masks, target)
        base = _score(baseline, target)
        report = MetricsReport(
            rows=[ImageRow(i, s[0], s[1], l) for i, s, l in zip(target.ids, scores, losses)],
            fingerprint=fp, mode=mode, flags=cfg.flags.tag,
            source_only_mean_iou=float(np.mean([b[0] for b in base])) if base else float("nan"),
            wall_times=times,
        )
        report.write(out)
    log.info("mean iou %.4f (source-only %.4f)", report.mean_iou, report.source_only_mean_iou)
    return report


def evaluate_persisted(cfg: ExperimentConfig, data_dir=None) -> MetricsReport:
    """Rebuild the report from checkpoints, stored latents and traces without training or searching."""
    out = Path(cfg.output_dir)
    layout = Layout(out)
    bench = load_benchmark(cfg, layout.data if data_dir is None else data_dir)
    target = bench["target_test"]
    mode = evaluation_mode(cfg)
    seg, _ = obtain_seg(cfg, bench, layout, train=False)
    images = target.image_stack()
    baseline = _masks(seg, images)
    losses = [None] * len(target)
    if mode == "source-only":
        masks = baseline
    else:
        vae, _ = obtain_vae(cfg, bench, seg, layout, train=False)
        if mode == "reconstruction":
            masks = _masks(seg, np.clip(reconstruct(vae, images), 0.0, 1.0))
        else:
            for name in ("latents.zip", "traces.jsonl"):
                if not (out / name).exists():
                    raise CheckpointError(f"search artifact not found: {out / name}")
            ids, z = load_latents(out / "latents.zip")
            traces = {t["image_id"]: t for t in read_traces(out / "traces.jsonl")}
            if ids != target.ids or set(traces) != set(ids):
                raise CheckpointError("stored latents do not match the target dataset")
            with single_thread():
                clones = np.stack([clone_from_latent(vae, z[i], images[i][:, :, None])[:, :, 0]
                                   for i in range(len(ids))])
            masks = _masks(seg, clones)
            losses = [float(traces[i]["final_loss"]) for i in ids]
    scores = _score(masks, target)
    base = _score(baseline, target)
    return MetricsReport(
        rows=[ImageRow(i, s[0], s[1], l) for i, s, l in zip(target.ids, scores, losses)],
        fingerprint=fingerprint(cfg), mode=mode, flags=cfg.flags.tag,
        source_only_mean_iou=float(np.mean([b[0] for b in base])) if base else float("nan"),
    )


# --- ablation and search curves ---------------------------------------------

ABLATION_HEADER = ("edge", "perceptual", "search", "mode", "mean_iou", "median_iou", "mean_dice", "status",
                   "fingerprint")


def run_ablation_matrix(cfg: ExperimentConfig, train: bool = True, data_dir=None) -> list[dict]:
    """All eight flag combinations on shared data, checkpoints and seeds.

    A failing row is marked and the others still run.
    """
    root = Path(cfg.output_dir)
    bench = load_benchmark(cfg, Layout(root).data if data_dir is None else data_dir)
    rows = []
    for e, p, s in ABLATION_ORDER:
        row_cfg = cfg.with_flags(use_edge=bool(e), use_perceptual=bool(p), use_search=bool(s))
        row = {"edge": e, "perceptual": p, "search": s, "mode": evaluation_mode(row_cfg),
               "fingerprint": fingerprint(row_cfg)}
        # each row reports into its own directory; data and checkpoints stay shared
        run_cfg = replace(row_cfg, output_dir=str(root / "rows" / row_cfg.flags.tag))
        try:
            rep = run_pipeline(run_cfg, train=train, bench=bench, layout=Layout(Path(run_cfg.output_dir), root))
            row.update(mean_iou=rep.mean_iou, median_iou=rep.median_iou, mean_dice=rep.mean_dice, status="ok")
        except GLSSError as exc:
            log.error("ablation row %s failed: %s", row_cfg.flags.tag, exc)
            row.update(mean_iou=None, median_iou=None, mean_dice=None, status=f"failed: {exc}".replace("\t", " "))
        rows.append(row)
    write_tsv(root / "ablation.tsv", ABLATION_HEADER, rows)
    return rows


CURVE_HEADER = ("metric", "k", "source", "mean_loss", "mean_iou", "fingerprint")


def run_search_curve(cfg: ExperimentConfig, k_max: int = 200, metrics=("ssim", "mse", "mae"), step: int = 10,
                     train: bool = True, data_dir=None) -> list[dict]:
    """Mean best-so-far loss and mean IoU at checkpoints ``0, step, ..., k_max`` per metric.

    The IoU at ``k = 0`` is the reconstruction baseline (no search), tagged
    ``source = reconstruction``; its loss column holds the initial search loss.
    """
    if k_max < 1 or step < 1:
        raise StageError("k_max and step must be positive", "curve")
    cfg = cfg.with_flags(use_search=True)
    root = Path(cfg.output_dir)
    layout = Layout(root)
    bench = load_benchmark(cfg, layout.data if data_dir is None else data_dir)
    target = bench["target_test"]
    seg, _ = obtain_seg(cfg, bench, layout, train)
    vae, _ = obtain_vae(cfg, bench, seg, layout, train)
    images = target.image_stack()
    recon_iou = float(np.mean([s[0] for s in _score(_masks(seg, np.clip(reconstruct(vae, images), 0, 1)), target)]))
    ks = sorted(set(range(0, k_max + 1, step)) | {k_max})
    rows = []
    for metric in metrics:
        scfg = replace(cfg.resolved().search, metric=metric, iterations=k_max)
        results = search_many(vae, [im[:, :, None] for im in images], scfg, ids=target.ids,
                              workers=cfg.workers or None, snapshots=ks)
        fp = fingerprint(replace(cfg, search=replace(cfg.search, metric=metric, iterations=k_max)))
        for k in ks:
            best = [min(r.losses[: k + 1]) for r in results]
            if k == 0:
                iou, source = recon_iou, "reconstruction"
            else:
                with single_thread():
                    clones = np.stack([clone_from_latent(vae, r.snapshots[k], images[i][:, :, None])[:, :, 0]
                                       for i, r in enumerate(results)])
                iou = float(np.mean([s[0] for s in _score(_masks(seg, clones), target)]))
                source = "search"
            rows.append({"metric": metric, "k": k, "source": source, "mean_loss": float(np.mean(best)),
                         "mean_iou": iou, "fingerprint": fp})
    write_tsv(root / "curve.tsv", CURVE_HEADER, rows)
    return rows


def ablation_ok(rows: list[dict], tol: float = 0.01) -> tuple[bool, str]:
    """The all-components row is the best and adding search to (edge, L_p) does not hurt."""
    by = {(r["edge"], r["perceptual"], r["search"]): r["mean_iou"] for r in rows}
    if any(v is None for v in by.values()):
        return False, "failed rows"
    full = by[(1, 1, 1)]
    best = max(by.values())
    ok = full >= best and by[(1, 1, 1)] - by[(1, 1, 0)] >= -tol
    return ok, f"full={full:.4f} best={best:.4f} no-LS={by[(1, 1, 0)]:.4f}"


__all__ = [
    "ABLATION_ORDER", "ImageRow", "Layout", "MetricsReport", "ablation_ok", "evaluate_persisted",
    "evaluation_mode", "load_benchmark", "read_summary", "read_tsv", "run_ablation_matrix",
    "run_pipeline", "run_search_curve", "write_benchmark", "write_tsv",
]
