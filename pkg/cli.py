"""
Command-line front end.

    python main.py gen-data --config configs/world.json --out data/
    python main.py train --world W --model M --train T --out runs/w2r2 [--data data/]
    python main.py probe --checkpoint runs/w2r2/checkpoint.json --data data/val.jsonl
    python main.py sweep --base configs/ --lambda-grid 0,1.5 --mu-grid 0.7 --out sweeps/a
    python main.py report --sweep sweeps/a/sweep.csv --history runs/*/metrics.csv --out reports/
    python main.py compare --base configs/ --seeds 0,1,2 --out compare/
    python main.py replay --manifest runs/w2r2/manifest.json --out runs/w2r2_again

Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric failure, 5 every sweep cell failed.
Every command writes its manifest before any long computation starts.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import config
import scenes
import storage
from config import ModelConfig, TrainConfig, WorldConfig, apply_seed_override, config_from_dict, load_config
from diagnostics import collect_pooled_features, separation_index, shortcut_probe
from errors import ConfigError, DataIOError, ReportError, ShapeError, SweepFailure, W2R2Error
from logging_config import setup_logging
from model import load_checkpoint
from report import emit_report, plot_feature_scatter
from sweep import (ABLATION_LAMBDA_GRID, ABLATION_MU_GRID, parse_grid, run_comparison, run_sweep,
                   summarize_comparison)
from trainer import train_run

logger = logging.getLogger(__name__)

BASE_FILES = {"world": "world.json", "model": "model.json", "train": "train.json"}
MANIFEST_CONFIGS = {"world": WorldConfig, "model": ModelConfig, "train": TrainConfig}


def _print_table(rows: Sequence[Sequence[str]]) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for n, row in enumerate(rows):
        print("  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip())
        if n == 0:
            print("  ".join("-" * w for w in widths))


def _base_paths(base_dir: str) -> Dict[str, str]:
    paths = {name: os.path.join(base_dir, fname) for name, fname in BASE_FILES.items()}
    missing = [p for p in paths.values() if not os.path.isfile(p)]
    if missing:
        raise ConfigError(f"base directory {base_dir} is missing {missing}")
    return paths


def _load_configs(paths: Dict[str, str]):
    world = apply_seed_override(load_config(paths["world"], WorldConfig))
    model = apply_seed_override(load_config(paths["model"], ModelConfig))
    train = apply_seed_override(load_config(paths["train"], TrainConfig))
    return world, model, train


def _splits(world: WorldConfig, data_dir: Optional[str]) -> Dict[str, scenes.GroundingSplit]:
    if data_dir is None:
        return scenes.build_dataset(world)
    logger.info(f"Loading dataset from {data_dir}")
    return scenes.load_dataset(data_dir, world)


def _gen_data(world: WorldConfig, out: str, config_paths: Dict[str, str]) -> int:
    run_dir = storage.RunDirectory(out)
    run_dir.write_manifest(
        "gen-data", config_paths, {"world": world.seed},
        {name: scenes.split_path(out, name) for name in ("train", "val")},
        {"world": world},
    )
    scenes.build_dataset(world, out)
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    world = apply_seed_override(load_config(args.config, WorldConfig))
    return _gen_data(world, args.out, {"world": args.config})


def _train(world: WorldConfig, model: ModelConfig, train: TrainConfig, out: str,
           config_paths: Dict[str, str], data: Optional[str] = None) -> int:
    run_dir = storage.RunDirectory(out)
    run_dir.write_manifest(
        "train", config_paths, {"world": world.seed, "model": model.seed, "train": train.seed},
        {"metrics": run_dir.metrics_csv, "checkpoint": run_dir.checkpoint, "run_config": run_dir.run_config},
        {"world": world, "model": model, "train": train},
    )
    _, history = train_run(world, model, train, _splits(world, data), out)
    last = history[-1]
    _print_table([
        ["metric", "value"],
        *[[name, f"{value:.4f}" if isinstance(value, float) else str(value)]
          for name, value in last.to_row().items()],
    ])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    paths = {"world": args.world, "model": args.model, "train": args.train}
    world, model, train = _load_configs(paths)
    if args.data:
        paths["data"] = args.data
    return _train(world, model, train, args.out, paths, args.data)


def cmd_replay(args: argparse.Namespace) -> int:
    """Re-run a gen-data or train command from the configs embedded in its manifest."""
    manifest = storage.load_manifest(args.manifest)
    try:
        configs = {name: config_from_dict(cls, manifest.configs[name])
                   for name, cls in MANIFEST_CONFIGS.items() if name in manifest.configs}
    except ConfigError as e:
        raise ConfigError(f"{args.manifest}: {e}")
    source = {"manifest": args.manifest}
    if manifest.command == "gen-data" and "world" in configs:
        return _gen_data(configs["world"], args.out, source)
    if manifest.command == "train" and len(configs) == len(MANIFEST_CONFIGS):
        return _train(configs["world"], configs["model"], configs["train"], args.out, source)
    raise ConfigError(f"{args.manifest}: cannot replay {manifest.command!r} from the recorded configs")


def _probe_split(data: str, world: WorldConfig) -> scenes.GroundingSplit:
    path = scenes.split_path(data, "val") if os.path.isdir(data) else data
    return scenes.load_split(path, world)


def cmd_probe(args: argparse.Namespace) -> int:
    params, world = load_checkpoint(args.checkpoint)
    if args.world:
        world = load_config(args.world, WorldConfig)
    if world is None:
        raise ConfigError(f"{args.checkpoint} records no world config; pass --world")
    if world.num_categories != params.num_categories:
        raise ConfigError(f"checkpoint has {params.num_categories} categories, world has {world.num_categories}")

    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    run_dir = storage.RunDirectory(out_dir)
    csv_path = run_dir.path("probe.csv")
    svg_path = run_dir.path("features_pca.svg")
    config_paths = {"checkpoint": args.checkpoint, "data": args.data}
    if args.world:
        config_paths["world"] = args.world
    run_dir.write_manifest("probe", config_paths, {"world": world.seed, "model": params.config.seed},
                           {"probe": csv_path, "features": svg_path}, {"world": world, "model": params.config})

    split = _probe_split(args.data, world)
    try:
        result = shortcut_probe(params, split)
        features = collect_pooled_features(params, split)
        separation = separation_index(params, split).as_float()
    except ShapeError as e:
        raise ConfigError(f"checkpoint is incompatible with {args.data}: {e}")

    row = {**result.to_dict(), "separation_index": separation}
    storage.write_csv(csv_path, [row], list(row))
    _print_table(result.table_rows())
    print(f"separation index: {separation:.4f}")
    try:
        plot_feature_scatter(features, svg_path)
    except ReportError as e:
        logger.warning(f"Skipping feature scatter: {e}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    lambdas = parse_grid(args.lambda_grid, "lambda")
    mus = parse_grid(args.mu_grid, "mu")
    paths = _base_paths(args.base)
    world, model, train = _load_configs(paths)
    run_dir = storage.RunDirectory(args.out)
    sweep_csv = run_dir.path("sweep.csv")
    run_dir.write_manifest(
        "sweep", paths, {"world": world.seed, "model": model.seed, "train": train.seed},
        {"sweep": sweep_csv, "report": run_dir.path("summary.txt")},
        {"world": world, "model": model, "train": train},
    )
    result = run_sweep(world, model, train, lambdas, mus, args.out, args.workers, args.common_seed,
                       _splits(world, args.data))
    if result.succeeded == 0:
        raise SweepFailure(f"all {len(result.cells)} sweep cells failed")
    emit_report(sweep_csv, [], args.out)
    _print_table([["lambda", "mu", "status", "sel_acc_fused", "soft_iou_shortcut"]] + [
        [f"{c.lam:g}", f"{c.mu:g}", c.status,
         f"{c.record.sel_acc_fused:.4f}" if c.record else "", f"{c.record.soft_iou_shortcut:.4f}" if c.record else ""]
        for c in result.cells
    ])
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    if not args.sweep and not args.history:
        raise ConfigError("nothing to report: pass --sweep and/or --history")
    run_dir = storage.RunDirectory(args.out)
    inputs = {f"history_{i}": p for i, p in enumerate(args.history or [])}
    if args.sweep:
        inputs["sweep"] = args.sweep
    run_dir.write_manifest("report", inputs, {}, {"summary": run_dir.path("summary.txt")})
    outputs = emit_report(args.sweep, args.history or [], args.out)
    with open(outputs[-1], "r") as f:
        print(f.read().rstrip())
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    seeds: List[int] = []
    for raw in args.seeds.split(","):
        try:
            seeds.append(int(raw))
        except ValueError:
            raise ConfigError(f"seed {raw!r} is not an integer")
    paths = _base_paths(args.base)
    world, model, train = _load_configs(paths)
    run_dir = storage.RunDirectory(args.out)
    run_dir.write_manifest("compare", paths, {"world": world.seed, **{f"run_{s}": s for s in seeds}},
                           {"comparison": run_dir.path("comparison.csv")},
                           {"world": world, "model": model, "train": train})
    frame = run_comparison(world, model, train, seeds, _splits(world, args.data), args.out)
    summary = summarize_comparison(frame)
    rows = [["objective"] + list(summary.columns)]
    for objective, values in summary.iterrows():
        rows.append([objective] + [f"{v:.4f}" for v in values])
    _print_table(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="w2r2", description="Pull-push training lab for 2D-shortcut deterrence")
    parser.add_argument("--log-level", default=None, help=f"logging level (default {config.LOG_LEVEL})")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val JSON-lines datasets")
    p.add_argument("--config", required=True, help="world config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--world", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: regenerate from the world config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("replay", help="re-run a gen-data or train command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("probe", help="2D-only shortcut probe of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSON-lines split, or a dataset directory (uses val)")
    p.add_argument("--world", default=None, help="world config, if the checkpoint does not record one")
    p.add_argument("--out", default=None, help="output directory (default: the checkpoint's directory)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="lambda x mu grid of independent runs")
    p.add_argument("--base", required=True, help="directory with world.json, model.json, train.json")
    p.add_argument("--lambda-grid", default=",".join(f"{v:g}" for v in ABLATION_LAMBDA_GRID),
                   help="comma-separated lambda values (default: %(default)s)")
    p.add_argument("--mu-grid", default=",".join(f"{v:g}" for v in ABLATION_MU_GRID),
                   help="comma-separated mu values (default: %(default)s)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=config.SWEEP_WORKERS)
    p.add_argument("--common-seed", action="store_true", help="reuse the base seeds in every cell")
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render charts and summary from existing CSVs")
    p.add_argument("--sweep", default=None)
    p.add_argument("--history", nargs="*", default=None, help="metrics.csv files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="baseline vs W2R2 over several seeds")
    p.add_argument("--base", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level or config.LOG_LEVEL, config.LOG_FILE)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code

    try:
        return args.func(args)
    except W2R2Error as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return DataIOError.exit_code
