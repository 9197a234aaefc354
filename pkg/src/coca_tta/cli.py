"""Command-line entry point: pretrain | adapt | sweep | report | dataset-export | dataset-import.

All randomness flows from a single seed; sweep entry i derives its seed
as splitmix64(seed, 1000 + i). The COCA_OUT_DIR environment variable
overrides the default output root.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, models, shiftgen
from .harness import RunConfig, mix64, run, sweep_points

_SCHEMA = {
    "": {"schema", "models", "task", "stream", "corruption", "strategy",
         "n_per_class", "pretrain_epochs", "pretrain_lr", "pretrain_batch_size",
         "lam_col", "tau_steps", "tau_step_size", "tau_clamp", "tau_min",
         "tau_max", "loss_masks", "filter_threshold_factor",
         "collapse_threshold", "seed"},
    "models[]": {"spec", "lr", "pretrain_epochs"},
    "models[].spec": {"kind", "input_shape", "hidden_sizes", "norm_kind", "num_classes"},
    "task": {"kind", "num_classes", "dims", "image_shape", "center_separation", "noise_std", "center_seed"},
    "stream": {"order", "batch_size", "total_samples", "seed"},
    "corruption": {"kind", "severity"},
    "loss_masks": {"sa", "mar", "ckd"},
}


class ConfigError(ValueError):
    pass


def _check_keys(obj, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    allowed = _SCHEMA[path]
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {path or '<root>'}: {sorted(unknown)}")


def validate_config(doc: dict) -> RunConfig:
    _check_keys(doc, "")
    if "models" not in doc or "task" not in doc:
        raise ConfigError("config requires 'models' and 'task'")
    for m in doc["models"]:
        _check_keys(m, "models[]")
        _check_keys(m.get("spec", {}), "models[].spec")
    _check_keys(doc["task"], "task")
    if "stream" in doc:
        _check_keys(doc["stream"], "stream")
    if doc.get("corruption") is not None:
        _check_keys(doc["corruption"], "corruption")
    if "loss_masks" in doc:
        _check_keys(doc["loss_masks"], "loss_masks")
    try:
        return RunConfig.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str, seed_override=None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    cfg = validate_config(doc)
    if seed_override is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=int(seed_override))
    return cfg


def _out_dir(arg) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get("COCA_OUT_DIR", "."))


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args.out)
    pretrained = []
    logs = []
    feats, labels = shiftgen.gen_source(cfg.task, cfg.n_per_class, mix64(cfg.seed, 1))
    for i, entry in enumerate(cfg.models):
        model = models.build_model(entry.spec, mix64(cfg.seed, 100 + i))
        log = models.pretrain(model, feats, labels,
                              epochs=entry.pretrain_epochs or cfg.pretrain_epochs,
                              lr=cfg.pretrain_lr, seed=mix64(cfg.seed, 200 + i),
                              batch_size=cfg.pretrain_batch_size)
        pretrained.append(model)
        logs.append(log)
    out.mkdir(parents=True, exist_ok=True)
    for i, model in enumerate(pretrained):
        models.save_checkpoint(model, str(out / f"model_{i}.ckpt"))
    (out / "training_log.json").write_text(
        json.dumps({"schema": 1, "config": cfg.to_dict(), "logs": logs},
                   sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(pretrained)} checkpoint(s) to {out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args.out)
    loaded = None
    if args.checkpoints:
        loaded = []
        for i in range(len(cfg.models)):
            path = Path(args.checkpoints) / f"model_{i}.ckpt"
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint: {path}")
            loaded.append(models.load_checkpoint(str(path)))
    t0 = time.perf_counter()
    report = run(cfg, models=loaded)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.metrics_csv())
    (out / "timing.txt").write_text(f"{time.perf_counter() - t0:.3f}\n")
    print(f"wrote report.json and metrics.csv to {out}")
    return 0


def _sweep_one(cfg_dict: dict, point: dict, index: int, out_dir: str) -> dict:
    from dataclasses import replace
    cfg = RunConfig.from_dict(cfg_dict)
    for k, v in point.items():
        cfg = harness.apply_override(cfg, k, v)
    if "seed" not in point:
        cfg = replace(cfg, seed=mix64(cfg_dict["seed"], 1000 + index))
    report = run(cfg, use_cache=False)
    sub = Path(out_dir) / f"run_{index:03d}"
    sub.mkdir(parents=True, exist_ok=True)
    (sub / "report.json").write_text(report.to_json())
    (sub / "metrics.csv").write_text(report.metrics_csv())
    return {
        "run": f"run_{index:03d}",
        "point": json.dumps(point, sort_keys=True),
        "acc_anchor": report.acc_anchor,
        "acc_aux": report.acc_aux,
        "acc_combined": report.acc_combined,
        "tau_final": report.tau_final,
    }


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    with open(args.grid, "r", encoding="utf-8") as f:
        grid = json.load(f)
    points = sweep_points(grid)  # raises on empty grid
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    rows = [None] * len(points)
    if args.parallel > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = {pool.submit(_sweep_one, cfg_dict, p, i, str(out)): i
                       for i, p in enumerate(points)}
            for fut in concurrent.futures.as_completed(futures):
                rows[futures[fut]] = fut.result()
    else:
        for i, p in enumerate(points):
            rows[i] = _sweep_one(cfg_dict, p, i, str(out))
    def fmt(v):
        return "NA" if v is None else format(v, ".12g")
    lines = ["run,point,acc_anchor,acc_aux,acc_combined,tau_final"]
    for r in rows:
        lines.append(",".join([r["run"], '"' + r["point"].replace('"', '""') + '"',
                               fmt(r["acc_anchor"]), fmt(r["acc_aux"]),
                               fmt(r["acc_combined"]), fmt(r["tau_final"])]))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(points)} run(s) and summary.csv to {out}")
    return 0


_PLOT_COLUMNS = ("acc_anchor", "acc_aux", "acc_combined", "tau", "L_total")


def cmd_report(args) -> int:
    root = Path(args.in_dir)
    metrics_files = sorted(root.rglob("metrics.csv"))
    if not metrics_files:
        raise FileNotFoundError(f"no metrics.csv found under {root}")
    out_lines = ["series,x,y"]
    for path in metrics_files:
        name = path.parent.relative_to(root).as_posix()
        name = name if name != "." else path.parent.name
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                for col in _PLOT_COLUMNS:
                    if row[col] != "NA":
                        out_lines.append(f"{name}/{col},{row['batch']},{row[col]}")
    out_path = Path(args.plot_data)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(out_lines) + "\n")
    print(f"wrote plot data for {len(metrics_files)} run(s) to {out_path}")
    return 0


def cmd_dataset_export(args) -> int:
    cfg = load_config(args.config, args.seed)
    feats, labels = shiftgen.gen_source(cfg.task, cfg.n_per_class, mix64(cfg.seed, 3))
    if cfg.corruption is not None:
        feats = shiftgen.apply_corruption(feats, cfg.corruption, mix64(cfg.seed, 4))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    shiftgen.save_dataset(args.out, feats, labels)
    print(f"wrote {len(labels)} samples to {args.out}")
    return 0


def cmd_dataset_import(args) -> int:
    feats, labels = shiftgen.load_dataset(args.in_file)
    hist = np.bincount(labels).tolist()
    summary = {
        "schema": 1,
        "count": int(len(labels)),
        "feature_shape": list(feats.shape[1:]),
        "class_histogram": hist,
        "feature_mean": float(feats.mean()),
        "feature_std": float(feats.std()),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"imported {len(labels)} samples; summary at {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coca", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain source models and save checkpoints")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run one adaptation stream")
    p.add_argument("config")
    p.add_argument("--checkpoints", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="Cartesian-product sweep over config overrides")
    p.add_argument("config")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate run outputs into plot-ready series")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--plot-data", dest="plot_data", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dataset-export", help="write a (optionally corrupted) dataset file")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_dataset_export)

    p = sub.add_parser("dataset-import", help="read a dataset file and emit a summary")
    p.add_argument("--in", dest="in_file", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_import)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
