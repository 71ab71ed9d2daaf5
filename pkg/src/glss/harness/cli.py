"""Command-line entry point: ``glss <subcommand> [options]``.

Configuration comes from ``--config FILE`` (flat ``key = value`` lines),
then ``--set key=value`` pairs and ``--<dotted.key> value`` flags, in that
order. Exit status is 0 on success, 1 on a usage error and 2 when a stage
fails at runtime.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from glss.errors import GLSSError, InvalidInputError
from glss.harness import lemma, pipeline
from glss.harness.config import ExperimentConfig, dump_config, fingerprint, known_keys, load_config
from glss.harness.pipeline import Layout, fmt, write_tsv

log = logging.getLogger("glss")

COMMANDS = ("gen-data", "train-seg", "train-vae", "run", "ablate", "curve", "lemma-check", "eval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glss", description="Generative latent search for source-only segmentation.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen-data": "render the synthetic benchmark into <output_dir>/data",
        "train-seg": "train the segmentation network on source data",
        "train-vae": "train the edge-conditioned VAE (needs a segmentation checkpoint)",
        "run": "evaluate the target test split from trained checkpoints",
        "ablate": "run all eight component combinations and write ablation.tsv",
        "curve": "mean loss and IoU against search iterations, written to curve.tsv",
        "lemma-check": "nearest-neighbour convergence check, written to lemma.tsv",
        "eval": "rebuild the run's aggregates from stored checkpoints and traces",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--output-dir", help="directory for all artifacts")
        sp.add_argument("--workers", type=int, help="latent search worker processes (0: GLSS_WORKERS or CPU count)")
        if name == "curve":
            sp.add_argument("--k-max", type=int, default=200)
            sp.add_argument("--step", type=int, default=10)
            sp.add_argument("--metrics", default="ssim,mse,mae")
        if name == "lemma-check":
            sp.add_argument("--distribution", action="append", choices=lemma.DISTRIBUTIONS,
                            help="repeatable; default all")
            sp.add_argument("--metric", choices=lemma.METRICS, help="default depends on the distribution")
            sp.add_argument("--n", default=",".join(str(n) for n in lemma.DEFAULT_N), help="comma-separated")
            sp.add_argument("--trials", type=int, default=100)
            sp.add_argument("--mc-samples", type=int, default=1_000_000)
    return p


def _split_dotted(rest: list[str], parser) -> dict[str, str]:
    """``--search.iterations 50`` or ``--search.iterations=50`` for any known key."""
    keys = set(known_keys())
    out, i = {}, 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}\n\n{parser.format_help()}")
        key, eq, val = tok[2:].partition("=")
        if key not in keys:
            raise UsageError(f"unrecognized argument {tok!r}\n\n{parser.format_help()}")
        if not eq:
            if i + 1 >= len(rest):
                raise UsageError(f"{tok} expects a value")
            val = rest[i + 1]
            i += 1
        out[key] = val
        i += 1
    return out


def resolve_config(args, extra: dict[str, str]) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    overrides.update(extra)
    if args.seed is not None:
        overrides["global_seed"] = str(args.seed)
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    path = args.config
    if path is None and args.command == "eval":
        # eval defaults to the configuration the run recorded
        out = Path(overrides.get("output_dir", ExperimentConfig.output_dir))
        if (out / "resolved.cfg").is_file():
            path = out / "resolved.cfg"
    return load_config(path, overrides)


def _setup_logging(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "glss.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("glss")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _history_rows(history, fp):
    keys = sorted({k for h in history for k in h if k != "epoch"})
    return ("epoch", *keys, "fingerprint"), [{"epoch": h["epoch"], **{k: h.get(k) for k in keys}, "fingerprint": fp}
                                             for h in history]


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    bench = pipeline.build_benchmark(cfg.resolved().synth)
    data = Layout(Path(cfg.output_dir)).data
    pipeline.write_benchmark(bench, data)
    write_tsv(data / "datasets.tsv", ("split", "n", "content_hash", "fingerprint"), [
        {"split": s, "n": len(bench[s]), "content_hash": bench[s].content_hash(), "fingerprint": fingerprint(cfg)}
        for s in pipeline.SPLITS
    ])
    print(f"wrote {sum(len(d) for d in bench.values())} images to {data}")
    return 0


def cmd_train_seg(cfg: ExperimentConfig, args) -> int:
    layout = Layout(Path(cfg.output_dir))
    bench = pipeline.load_benchmark(cfg, layout.data)
    model, path = pipeline.obtain_seg(cfg, bench, layout, train=True)
    header, rows = _history_rows(model.history, fingerprint(cfg))
    write_tsv(Path(cfg.output_dir) / "train-seg.tsv", header, rows)
    print(f"segmentation checkpoint: {path}")
    return 0


def cmd_train_vae(cfg: ExperimentConfig, args) -> int:
    layout = Layout(Path(cfg.output_dir))
    bench = pipeline.load_benchmark(cfg, layout.data)
    seg, _ = pipeline.obtain_seg(cfg, bench, layout, train=False)
    model, path = pipeline.obtain_vae(cfg, bench, seg, layout, train=True)
    header, rows = _history_rows(model.history, fingerprint(cfg))
    f = cfg.flags
    write_tsv(Path(cfg.output_dir) / f"train-vae-edge{int(f.use_edge)}-perc{int(f.use_perceptual)}.tsv", header, rows)
    print(f"VAE checkpoint: {path}")
    return 0


def _print_summary(report):
    for k, v in report.aggregates().items():
        print(f"{k}\t{fmt(v)}")


def cmd_run(cfg: ExperimentConfig, args) -> int:
    report = pipeline.run_pipeline(cfg, train=False)
    _print_summary(report)
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    rows = pipeline.run_ablation_matrix(cfg)
    for r in rows:
        print(f"edge={r['edge']} perceptual={r['perceptual']} search={r['search']} "
              f"mean_iou={fmt(r['mean_iou'])} {r['status']}")
    ok, detail = pipeline.ablation_ok(rows)
    print(f"ordering {'holds' if ok else 'does not hold'}: {detail}")
    return 0 if all(r["status"] == "ok" for r in rows) else 2


def cmd_curve(cfg: ExperimentConfig, args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    rows = pipeline.run_search_curve(cfg, args.k_max, metrics, args.step, train=False)
    for r in rows:
        print(f"{r['metric']}\t{r['k']}\t{fmt(r['mean_loss'])}\t{fmt(r['mean_iou'])}")
    return 0


def cmd_lemma(cfg: ExperimentConfig, args) -> int:
    try:
        n_list = [int(x) for x in args.n.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--n expects comma-separated integers, got {args.n!r}") from None
    dists = args.distribution or list(lemma.DISTRIBUTIONS)
    fp = hashlib.sha256(repr((dists, args.metric, n_list, args.trials, args.mc_samples, cfg.global_seed))
                        .encode()).hexdigest()[:16]
    rows, cov = [], []
    for d in dists:
        try:
            rep = lemma.lemma_check(d, args.metric, n_list, args.trials, cfg.global_seed,
                                    mc_samples=args.mc_samples)
        except InvalidInputError as exc:
            raise UsageError(str(exc)) from None
        for r in rep.rows():
            rows.append({**r, "verdict": rep.verdict, "note": rep.note, "fingerprint": fp})
        for c in rep.coverage:
            cov.append({"distribution": d, "metric": rep.metric, **c, "fingerprint": fp})
        print(f"{d}\t{rep.metric}\tdecreasing={fmt(rep.verdict)}\tcoverage={fmt(rep.coverage_ok)}")
    out = Path(cfg.output_dir)
    write_tsv(out / "lemma.tsv", ("distribution", "metric", "n", "median", "p95", "verdict", "note", "fingerprint"),
              rows)
    write_tsv(out / "lemma-coverage.tsv", ("distribution", "metric", "n", "delta", "p_delta", "predicted",
                                           "observed", "se", "within", "fingerprint"), cov)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    report = pipeline.evaluate_persisted(cfg)
    write_tsv(out / "eval-summary.tsv", ("key", "value"),
              [{"key": k, "value": v} for k, v in report.aggregates().items()])
    _print_summary(report)
    stored = out / "summary.tsv"
    if stored.exists() and stored.read_bytes() != (out / "eval-summary.tsv").read_bytes():
        print("eval: aggregates differ from summary.tsv", file=sys.stderr)
        return 2
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train-seg": cmd_train_seg, "train-vae": cmd_train_vae, "run": cmd_run,
    "ablate": cmd_ablate, "curve": cmd_curve, "lemma-check": cmd_lemma, "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        cfg = resolve_config(args, _split_dotted(rest, sub))
    except (UsageError, InvalidInputError) as exc:
        print(f"glss: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.output_dir)
    handler = None
    try:
        handler = _setup_logging(out)
        if args.command != "eval":
            (out / "resolved.cfg").write_text(dump_config(cfg))
        return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(f"glss: {exc}", file=sys.stderr)
        return 1
    except (GLSSError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"glss {args.command}: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            logging.getLogger("glss").removeHandler(handler)
            handler.close()


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

