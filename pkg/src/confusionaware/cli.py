"""Command-line surface: analyze, cluster, train, report, generate.

Every invocation writes a JSON run manifest (command, resolved options,
paths, version, timestamps, status) next to its outputs, even when the
command fails. Failures exit nonzero with a single-line
``error:<code>: message`` on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .clustering import kmeans
from .confusion import build_confusion_matrix, confusion_stats, normalize_confusion
from .dataio import (
    EmbeddingTable,
    SyntheticSpec,
    generate_synthetic,
    read_table,
    write_table,
)
from .exceptions import ConfusionAwareError, UnlabeledInputError
from .model import save_checkpoint
from .numeric import make_rng
from .pipeline import MultimodalDataset, TrainConfig, parse_config, run_training
from . import report as report_mod


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace, path: str):
        self.path = path
        self.data = {
            "command": command,
            "options": {k: v for k, v in vars(args).items() if k != "func"},
            "tool_version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
        }

    def finish(self, status: str, error: str | None = None):
        self.data["finished"] = _now()
        self.data["status"] = status
        if error is not None:
            self.data["error"] = error
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, default=str)
            fh.write("\n")


def cmd_analyze(args):
    table = read_table(args.input)
    if (table.labels < 0).all():
        raise UnlabeledInputError(
            "input table has no labels; run the cluster command first")
    os.makedirs(args.out, exist_ok=True)
    matrix = build_confusion_matrix(table, coverage=args.coverage)
    matrix.normalized = normalize_confusion(matrix.raw)
    stats = confusion_stats(matrix, bins=args.bins)
    report_mod.write_confusion_csv(
        matrix.raw, matrix.class_ids, os.path.join(args.out, "confusion_raw.csv"))
    report_mod.write_confusion_csv(
        matrix.normalized, matrix.class_ids,
        os.path.join(args.out, "confusion_normalized.csv"))
    report_mod.write_stats_csv(stats, os.path.join(args.out, "stats.csv"))
    report_mod.write_histogram_csv(
        stats.histogram, os.path.join(args.out, "histogram.csv"))
    report_mod.render_histogram_svg(
        stats.histogram, os.path.join(args.out, "histogram.svg"))
    print(f"mean={stats.mean!r} variance={stats.variance!r}")


def cmd_cluster(args):
    table = read_table(args.input)
    result = kmeans(table.features, args.k, restarts=args.restarts, seed=args.seed)
    write_table(EmbeddingTable(labels=result.assignments.astype(np.int64),
                               features=table.features), args.out)
    print(f"inertia={result.inertia!r}")


def cmd_train(args):
    with open(args.config) as fh:
        config = parse_config(fh.read())
    audio = read_table(os.path.join(args.data, "audio.dice"))
    video = read_table(os.path.join(args.data, "video.dice"))
    dataset = MultimodalDataset.from_tables(audio, video)
    os.makedirs(args.out, exist_ok=True)
    if config.selfsup_epochs == 0 and config.supervised_epochs == 0:
        print("warning: both phases have 0 epochs; nothing to train",
              file=sys.stderr)
        return
    trainer, reports = run_training(config, dataset)
    report_mod.write_epochs_csv(reports, os.path.join(args.out, "epochs.csv"))
    save_checkpoint(trainer.model, os.path.join(args.out, "final.dicm"))
    if config.supervised_epochs > 0:
        accuracy, _, _ = trainer.evaluate()
        print(f"eval_accuracy={accuracy!r}")


def cmd_report(args):
    before_stats = report_mod.read_stats_csv(args.before)
    after_stats = report_mod.read_stats_csv(args.after)
    before_hist = report_mod.read_histogram_csv(_histogram_sibling(args.before))
    after_hist = report_mod.read_histogram_csv(_histogram_sibling(args.after))
    report_mod.render_comparison_svg(before_hist, after_hist, args.out)
    d_mean = after_stats["mean"] - before_stats["mean"]
    d_var = after_stats["variance"] - before_stats["variance"]
    print(f"delta_mean={d_mean!r} delta_variance={d_var!r}")


def _histogram_sibling(stats_path: str) -> str:
    base = os.path.basename(stats_path)
    if "stats" in base:
        candidate = os.path.join(os.path.dirname(stats_path),
                                 base.replace("stats", "histogram"))
    else:
        candidate = os.path.join(os.path.dirname(stats_path), "histogram.csv")
    return candidate


def cmd_generate(args):
    pairs = []
    if args.confusable:
        for item in args.confusable.split(","):
            i, j, mult = item.split(":")
            pairs.append((int(i), int(j), float(mult)))
    spec = SyntheticSpec.random(
        classes=args.classes, per_class=args.per_class,
        audio_dim=args.audio_dim, video_dim=args.video_dim,
        seed=args.seed, spread=args.spread, std=args.std,
        confusable_pairs=pairs)
    audio, video = generate_synthetic(spec, make_rng(args.seed + 1))
    os.makedirs(args.out, exist_ok=True)
    write_table(audio, os.path.join(args.out, "audio.dice"))
    write_table(video, os.path.join(args.out, "video.dice"))
    print(f"wrote {audio.n} samples ({args.classes} classes) to {args.out}")


def _manifest_path(args) -> str:
    out = getattr(args, "out", None)
    if out is None:
        return "manifest.json"
    if getattr(args, "_out_is_dir", False):
        return os.path.join(out, "manifest.json")
    return out + ".manifest.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confusionaware",
        description="Confusion-aware fusion training toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="confusion matrix, stats, histogram")
    p.add_argument("--input", required=True)
    p.add_argument("--coverage", type=float, default=0.95)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze, _out_is_dir=True)

    p = sub.add_parser("cluster", help="K-means pseudo-labels")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster, _out_is_dir=False)

    p = sub.add_parser("train", help="self-supervised + supervised training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, _out_is_dir=True)

    p = sub.add_parser("report", help="before/after distribution comparison")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report, _out_is_dir=False)

    p = sub.add_parser("generate", help="synthetic multimodal dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--audio-dim", type=int, default=16)
    p.add_argument("--video-dim", type=int, default=16)
    p.add_argument("--std", type=float, default=1.0)
    p.add_argument("--spread", type=float, default=10.0)
    p.add_argument("--confusable", default="",
                   help="comma-separated i:j:multiplier triples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate, _out_is_dir=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = Manifest(args.command, args, _manifest_path(args))
    try:
        args.func(args)
    except ConfusionAwareError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        manifest.finish("failed", error=str(exc))
        return 1
    except OSError as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        manifest.finish("failed", error=str(exc))
        return 1
    manifest.finish("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
