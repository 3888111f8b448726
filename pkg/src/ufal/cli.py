"""Command-line interface: train-source, adapt, evaluate, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml

from . import plots
from .datasets import load_image_folder, make_blob_shift, make_two_moons_shift
from .models import load_checkpoint, save_checkpoint
from .reporting import (ABLATION_ROWS, build_model_for, extract_features,
                        filtering_curve, format_ablation_table, project_features,
                        run_ablation, summarize_ablation, write_ablation_csv,
                        write_projection_csv, write_series_csv)
from .trainer import AdaptationTrace, TrainConfig, adapt, evaluate, train_source

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "two_moons",
        "n_per_domain": 500,
        "rotation_degrees": 45.0,
        "noise": 0.1,
        "seed": 0,
    },
    "train": {},
}


def load_config(path=None, overrides=()) -> dict:
    """Merge the YAML config file with ``section.key=value`` overrides."""
    config = {"dataset": dict(DEFAULT_CONFIG["dataset"]), "train": {}}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        for section in ("dataset", "train"):
            if section in loaded:
                config[section].update(loaded[section])
        unknown = set(loaded) - {"dataset", "train"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in config:
            raise ValueError(f"override key {dotted!r} must be dataset.* or train.*")
        config[parts[0]][parts[1]] = yaml.safe_load(raw)
    return config


def build_datasets(dataset_cfg: dict):
    cfg = dict(dataset_cfg)
    kind = cfg.pop("kind")
    if kind == "two_moons":
        return make_two_moons_shift(**cfg)
    if kind == "blobs":
        return make_blob_shift(**cfg)
    if kind == "image_folder":
        root = cfg.pop("root")
        source_domain = cfg.pop("source_domain")
        target_domain = cfg.pop("target_domain")
        return (load_image_folder(root, source_domain, **cfg),
                load_image_folder(root, target_domain, **cfg))
    raise ValueError(f"unknown dataset kind {kind!r}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved_config(out_dir: Path, config: dict, train_config: TrainConfig):
    resolved = {"dataset": config["dataset"], "train": train_config.to_dict()}
    with open(out_dir / "resolved_config.yaml", "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)


def _prepare(args):
    config = load_config(args.config, args.set or ())
    train_config = TrainConfig.from_dict(config["train"])
    source, target = build_datasets(config["dataset"])
    return config, train_config, source, target


def cmd_train_source(args) -> int:
    config, train_config, source, target = _prepare(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model_for(train_config, source.X.shape[1], source.n_classes)
    train_source(model, source, train_config)
    save_checkpoint(model, out_dir / "source_model.pt")
    metrics = {
        "source_accuracy": evaluate(model, source, train_config.eval_metric),
        "target_accuracy": evaluate(model, target, train_config.eval_metric),
        "metric": train_config.eval_metric,
    }
    _write_json(out_dir / "metrics.json", metrics)
    _write_resolved_config(out_dir, config, train_config)
    print(f"source model -> {out_dir / 'source_model.pt'}")
    print(f"source {train_config.eval_metric}: {metrics['source_accuracy']:.4f}  "
          f"target {train_config.eval_metric}: {metrics['target_accuracy']:.4f}")
    return 0


def cmd_adapt(args) -> int:
    config, train_config, source, target = _prepare(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_model_for(train_config, source.X.shape[1], source.n_classes)
        train_source(model, source, train_config)
        save_checkpoint(model, out_dir / "source_model.pt")
    source_only_accuracy = evaluate(model, target, train_config.eval_metric)
    model, trace = adapt(model, source, target.without_labels(), train_config,
                         eval_data=target)
    save_checkpoint(model, out_dir / "adapted_model.pt")
    trace.to_jsonl(out_dir / "trace.jsonl")
    metrics = {
        "metric": train_config.eval_metric,
        "source_only_target_accuracy": source_only_accuracy,
        "adapted_target_accuracy": evaluate(model, target, train_config.eval_metric),
        "final_filtered_fraction": (trace.refreshes[-1].filtered_fraction
                                    if trace.refreshes else None),
    }
    _write_json(out_dir / "metrics.json", metrics)
    _write_resolved_config(out_dir, config, train_config)
    print(f"adapted model -> {out_dir / 'adapted_model.pt'}")
    print(f"target {train_config.eval_metric}: "
          f"{metrics['source_only_target_accuracy']:.4f} -> "
          f"{metrics['adapted_target_accuracy']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config, train_config, source, target = _prepare(args)
    model = load_checkpoint(args.checkpoint)
    data = source if args.split == "source" else target
    value = evaluate(model, data, args.metric or train_config.eval_metric)
    print(f"{args.split} {args.metric or train_config.eval_metric}: {value:.6f}")
    if args.out:
        _write_json(args.out, {"split": args.split,
                               "metric": args.metric or train_config.eval_metric,
                               "value": value})
    return 0


def cmd_ablate(args) -> int:
    config, train_config, source, target = _prepare(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(args.seeds) if args.seeds else (train_config.seed,)
    rows = ABLATION_ROWS
    if args.rows:
        wanted = set(args.rows)
        rows = [r for r in ABLATION_ROWS if r[0] in wanted]
        missing = wanted - {r[0] for r in rows}
        if missing:
            raise ValueError(f"unknown ablation rows: {sorted(missing)}")
    results = run_ablation(source, target, train_config, rows=rows, seeds=seeds)
    summary = summarize_ablation(results)
    write_ablation_csv(out_dir / "ablation.csv", results)
    write_series_csv(out_dir / "ablation_summary.csv",
                     [[row["name"], repr(row["mean_accuracy"]), row["n_seeds"],
                       row["n_failed"]] for row in summary],
                     header=["configuration", "mean_accuracy", "n_seeds", "n_failed"])
    plots.save_ablation_bars(summary, out_dir / "ablation.png")
    _write_resolved_config(out_dir, config, train_config)
    print(format_ablation_table(summary))
    n_failed = sum(1 for r in results if r.status != "ok")
    if n_failed:
        print(f"{n_failed} run(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    out_dir = Path(args.out) if args.out else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    config = load_config(run_dir / "resolved_config.yaml")
    train_config = TrainConfig.from_dict(config["train"])
    trace = AdaptationTrace.from_jsonl(run_dir / "trace.jsonl")
    series = filtering_curve(trace)
    write_series_csv(out_dir / "filtering_curve.csv", series,
                     header=["step", "filtered_fraction"])
    plots.save_filtering_curve(series, out_dir / "filtering_curve.png")
    plots.save_loss_curves(trace, out_dir / "losses.png")
    plots.save_accuracy_curve(trace, out_dir / "accuracy_curve.png")
    checkpoint = run_dir / "adapted_model.pt"
    if checkpoint.exists():
        model = load_checkpoint(checkpoint)
        _, target = build_datasets(config["dataset"])
        coords, labels = project_features(extract_features(model, target),
                                          target.labels)
        write_projection_csv(out_dir / "target_projection.csv", coords, labels)
        plots.save_projection(coords, labels, out_dir / "target_projection.png",
                              title="Adapted target features (top-2 PCs)")
    print(f"report written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ufal",
        description="Uncertainty-based filtering and feature alignment "
                    "for unsupervised domain adaptation")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_out=True):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config entry, e.g. train.phi=0.8")
        if with_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-source", help="supervised training on the source domain")
    add_common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="run the adaptation phase")
    add_common(p)
    p.add_argument("--checkpoint", default=None,
                   help="source checkpoint to start from (otherwise trained now)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    add_common(p, with_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("source", "target"), default="target")
    p.add_argument("--metric", choices=("accuracy", "mean_class_accuracy"),
                   default=None)
    p.add_argument("--out", default=None, help="optional metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the ablation table")
    add_common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--rows", nargs="+", default=None,
                   help="subset of ablation row names to run")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures and tables for a finished run")
    p.add_argument("--run", required=True, help="directory written by 'adapt'")
    p.add_argument("--out", default=None, help="report directory (default RUN/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    # Single-threaded math keeps repeated runs bit-identical.
    torch.set_num_threads(1)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
