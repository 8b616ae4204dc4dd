"""Command-line interface: search, warmup, finetune, extract, stats, eval, report.

``search`` runs the full pipeline (warm-up, progressive depth expansion,
fine-tuning, extraction) and leaves a self-contained run directory behind:
the effective config, the warm-up checkpoint, one best checkpoint per
visited depth, the final extracted model, a metrics CSV
(depth,epoch,phase,train_loss,val_accuracy,lr,seconds; one row per epoch per
phase), and a summary report.

With ``timing = none`` (the default) the seconds column is written as zero so
two runs with the same config and seed produce byte-identical CSVs; set
``timing = wall`` to record wall-clock epoch times instead.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import accounting, checkpoint
from .data import (
    Dataset,
    SynthSpec,
    channel_stats,
    load_cifar10_binary,
    load_idx,
    normalize,
    pad_and_expand,
    split,
    synthesize,
)
from .network import build_network, extract_odn
from .runconfig import ConfigError, RunConfig, load_run_config
from .search import EpochRecord, evaluate, finetune, search, warmup

METRICS_FIELDS = ["depth", "epoch", "phase", "train_loss", "val_accuracy", "lr", "seconds"]


class MetricsWriter:
    """Streams epoch records into the canonical metrics CSV."""

    def __init__(self, path, timing: str) -> None:
        self.path = Path(path)
        self.timing = timing
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_FIELDS)

    def __call__(self, rec: EpochRecord) -> None:
        seconds = rec.seconds if self.timing == "wall" else 0.0
        self._writer.writerow([rec.depth, rec.epoch, rec.phase,
                               f"{rec.train_loss:.6f}", f"{rec.val_accuracy:.4f}",
                               f"{rec.lr:.6g}", f"{seconds:.3f}"])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _load_raw_dataset(cfg: RunConfig, train: bool = True) -> Dataset | None:
    if cfg.dataset == "synthetic":
        if not train:
            return None
        return synthesize(SynthSpec(cfg.synth_classes, cfg.synth_samples_per_class,
                                    cfg.synth_image_size, cfg.synth_difficulty, cfg.seed))
    if cfg.dataset == "idx":
        if train:
            return load_idx(cfg.resolve_path(cfg.idx_train_images),
                            cfg.resolve_path(cfg.idx_train_labels), name="idx-train",
                            num_classes=cfg.num_classes or None)
        if cfg.idx_test_images and cfg.idx_test_labels:
            return load_idx(cfg.resolve_path(cfg.idx_test_images),
                            cfg.resolve_path(cfg.idx_test_labels), name="idx-test",
                            num_classes=cfg.num_classes or None)
        return None
    if train:
        paths = [cfg.resolve_path(p.strip()) for p in cfg.cifar_train_batches.split(",") if p.strip()]
        return load_cifar10_binary(paths)
    if cfg.cifar_test_batch:
        return load_cifar10_binary([cfg.resolve_path(cfg.cifar_test_batch)], name="cifar10-test")
    return None


def _preprocess(cfg: RunConfig, ds: Dataset) -> Dataset:
    c = ds.images.shape[1]
    target_c = cfg.in_channels or c
    target_hw = cfg.image_size or ds.images.shape[2]
    if target_c != c or target_hw != ds.images.shape[2] or target_hw != ds.images.shape[3]:
        ds = pad_and_expand(ds, target_hw, target_c)
    return ds


def prepare_data(cfg: RunConfig):
    """Load, subset, pad, split, and normalize per the run config.

    Returns (train, val, test_or_None, meta) where meta records the
    normalization constants actually applied.
    """
    full = _preprocess(cfg, _load_raw_dataset(cfg, train=True))
    if cfg.limit_train and cfg.limit_train < len(full):
        keep = np.sort(np.random.default_rng(cfg.seed).permutation(len(full))[: cfg.limit_train])
        full = full.subset(keep)
    pair = split(full, cfg.val_fraction, cfg.seed)
    mean, std = channel_stats(pair.train)
    train = normalize(pair.train, mean, std)
    val = normalize(pair.val, mean, std)
    test = _load_raw_dataset(cfg, train=False)
    if test is not None:
        test = normalize(_preprocess(cfg, test), mean, std)
    meta = {"dataset": full.name, "norm_mean": mean.tolist(), "norm_std": std.tolist(),
            "augment": cfg.augment, "width_multiplier": cfg.width_multiplier}
    return train, val, test, meta


def _build_net(cfg: RunConfig, train: Dataset):
    in_channels = cfg.in_channels or train.images.shape[1]
    num_classes = cfg.num_classes or train.num_classes
    return build_network(cfg.arch, in_channels, num_classes, cfg.width_multiplier, seed=cfg.seed)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_search(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")

    train, val, test, meta = prepare_data(cfg)
    net = _build_net(cfg, train)
    sc = cfg.search_config(net.depth_max)  # validates depths before training
    metrics = MetricsWriter(out / "metrics.csv", cfg.timing)
    try:
        warm = warmup(net, train, sc, sink=metrics, val_data=val)
        checkpoint.save_checkpoint(net, out / "warmup.odn", meta=meta)

        def keep_best(depth, network, best_acc):
            checkpoint.save_checkpoint(network, out / f"depth_{depth:02d}_best.odn",
                                       meta={**meta, "best_val_accuracy": best_acc})

        result = search(net, train, val, sc, warm, sink=metrics, depth_callback=keep_best)
        d_opt = result.optimal_depth
        final_acc = finetune(net, d_opt, train, val, sc, sink=metrics)
        odn = extract_odn(net, d_opt)
        checkpoint.save_checkpoint(odn, out / "final_odn.odn",
                                   meta={**meta, "best_val_accuracy": final_acc})

        stats = accounting.stats_at_depth(cfg.arch, d_opt, odn.num_classes,
                                          tuple(train.images.shape[1:]), cfg.width_multiplier)
        full_stats = accounting.stats_at_depth(cfg.arch, stats.depth_max, odn.num_classes,
                                               tuple(train.images.shape[1:]), cfg.width_multiplier)
        test_acc = evaluate(odn, test)[0] if test is not None else None
        summary = {
            "optimal_depth": d_opt,
            "depth_max": net.depth_max,
            "target_accuracy": cfg.target_accuracy,
            "target_reached": result.target_reached,
            "final_val_accuracy": round(final_acc, 4),
            "test_accuracy": round(test_acc, 4) if test_acc is not None else None,
            "total_epochs": result.total_epochs,
            "per_depth": [{"depth": h.depth, "epochs": h.epochs_trained,
                           "best_val_accuracy": round(h.best_val_accuracy, 4),
                           "lr_trace": h.lr_trace} for h in result.per_depth_history],
            "width_multiplier": cfg.width_multiplier,
            "params": stats.trainable_params,
            "size_mb": round(stats.size_mb, 4),
            "flops": stats.flops,
            "size_reduction_percent": round(accounting.reduction_percent(full_stats, stats), 2),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        lines = [f"optimal depth: {d_opt}/{net.depth_max} "
                 f"(target {'reached' if result.target_reached else 'NOT reached'})",
                 f"final val accuracy: {final_acc:.4f}"]
        if test_acc is not None:
            lines.append(f"test accuracy: {test_acc:.4f}")
        lines.append(f"params: {stats.params_millions:.2f} M, size: {stats.size_mb:.2f} MB, "
                     f"reduction: {summary['size_reduction_percent']:.2f} %")
        if cfg.width_multiplier != 1.0:
            lines.append(f"NOTE: width_multiplier {cfg.width_multiplier} (reduced-width model)")
        report = "\n".join(lines)
        (out / "summary.txt").write_text(report + "\n")
        print(report)
    finally:
        metrics.close()
    return 0


def cmd_warmup(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    train, val, _, meta = prepare_data(cfg)
    net = _build_net(cfg, train)
    sc = cfg.search_config(net.depth_max)
    metrics = MetricsWriter(out / "metrics.csv", cfg.timing)
    try:
        warmup(net, train, sc, sink=metrics, val_data=val)
        checkpoint.save_checkpoint(net, out / "warmup.odn", meta=meta)
    finally:
        metrics.close()
    print(f"warm-up checkpoint written to {out / 'warmup.odn'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = checkpoint.load_checkpoint(args.ckpt)
    if not hasattr(net, "forward_at_depth"):
        raise CheckpointUsageError("finetune needs a full (non-extracted) checkpoint")
    depth = args.depth or net.active_depth
    train, val, _, meta = prepare_data(cfg)
    sc = cfg.search_config(net.depth_max)
    metrics = MetricsWriter(out / "metrics.csv", cfg.timing)
    try:
        acc = finetune(net, depth, train, val, sc, sink=metrics)
    finally:
        metrics.close()
    checkpoint.save_checkpoint(net, out / "finetuned.odn",
                               meta={**meta, "best_val_accuracy": acc})
    print(f"{acc:.4f}")
    return 0


class CheckpointUsageError(RuntimeError):
    pass


def cmd_extract(args) -> int:
    net = checkpoint.load_checkpoint(args.ckpt)
    if not hasattr(net, "forward_at_depth"):
        raise CheckpointUsageError("extract needs a full (non-extracted) checkpoint")
    header = checkpoint.load_header(args.ckpt)
    odn = extract_odn(net, args.depth)
    checkpoint.save_checkpoint(odn, args.out_ckpt, meta=header.get("meta", {}))
    print(f"extracted depth-{args.depth} model written to {args.out_ckpt}")
    return 0


def cmd_eval(args) -> int:
    net = checkpoint.load_checkpoint(args.ckpt)
    header = checkpoint.load_header(args.ckpt)
    meta = header.get("meta", {})
    if args.config:
        cfg = load_run_config(args.config)
        ds = _preprocess(cfg, _load_raw_dataset(cfg, train=not args.test_set) or
                         _load_raw_dataset(cfg, train=True))
    else:
        ds = load_idx(args.images, args.labels, num_classes=header["num_classes"])
        hw = 32 if meta else ds.images.shape[2]
        ds = pad_and_expand(ds, max(hw, ds.images.shape[2]), header["in_channels"])
    if "norm_mean" in meta:
        ds = normalize(ds, np.array(meta["norm_mean"]), np.array(meta["norm_std"]))
    depth = header["depth"]
    acc, _ = evaluate(net, ds, depth)
    print(f"{acc:.4f}")
    return 0


def cmd_stats(args) -> int:
    c, h, w = (int(v) for v in args.input.split("x"))
    depths = range(1, accounting.stats_at_depth(args.arch, 1).depth_max + 1) \
        if args.all_depths else [args.depth]
    full_depth = accounting.stats_at_depth(args.arch, 1).depth_max
    full = accounting.stats_at_depth(args.arch, full_depth, args.classes, (c, h, w), args.width)
    stats_list = [accounting.stats_at_depth(args.arch, d, args.classes, (c, h, w), args.width)
                  for d in depths]
    print(accounting.render_table(stats_list, full))
    if args.csv:
        Path(args.csv).write_text(accounting.render_csv(stats_list, full))
    if args.json:
        Path(args.json).write_text(accounting.render_json_lines(stats_list, full))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(args.metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{args.metrics}: empty metrics file")
    by_key: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        by_key.setdefault((row["phase"], row["depth"]), []).append(row)
    summary_rows = []
    for (phase, depth), group in sorted(by_key.items()):
        name = f"curve_{phase}_depth_{int(depth):02d}.csv"
        with open(out / name, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(group)
        accs = [float(r["val_accuracy"]) for r in group]
        summary_rows.append({"phase": phase, "depth": depth, "epochs": len(group),
                             "best_val_accuracy": f"{max(accs):.4f}",
                             "final_lr": group[-1]["lr"]})
    with open(out / "depth_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["phase", "depth", "epochs",
                                                "best_val_accuracy", "final_lr"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary_rows)
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odn",
                                     description="Optimally deep network training and tooling")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run(name, fn, needs_ckpt=False):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if needs_ckpt:
            p.add_argument("--ckpt", required=True)
            p.add_argument("--depth", type=int, default=None)
        p.set_defaults(fn=fn)
        return p

    add_run("search", cmd_search)
    add_run("warmup", cmd_warmup)
    add_run("finetune", cmd_finetune, needs_ckpt=True)

    p = sub.add_parser("extract")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out-ckpt", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("eval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--test-set", action="store_true",
                   help="with --config, evaluate the configured test split")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stats")
    p.add_argument("--arch", required=True)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--all-depths", action="store_true")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--input", default="3x32x32")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--csv", default=None)
    p.add_argument("--json", default=None)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("report")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(limits=args.threads)
        except ImportError:
            pass
    try:
        return args.fn(args)
    except (ConfigError, checkpoint.CheckpointError, CheckpointUsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
