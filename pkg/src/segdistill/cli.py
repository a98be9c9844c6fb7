"""segdistill command line: ingest, stats, select, bank, distill.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_open
from .guidance import GuidanceError, build_feature_bank, read_feature_bank, write_feature_bank
from .masks import (
    DEFAULT_IGNORE_INDEX,
    CacheParseError,
    DatasetError,
    MaskDataset,
    compute_class_stats,
    distribution_report,
    read_histogram_cache,
    write_histogram_cache,
)
from .pipeline import ConfigError, Distiller, PipelineConfig, load_config, write_outputs
from .selection import (
    STRATEGIES,
    SelectionError,
    budget_from_ratio,
    read_feature_table,
    select_greedy,
    select_herding,
    select_kcenter,
    select_random,
    select_uniform,
    write_manifest,
)


class UsageError(Exception):
    pass


def _default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _add_source(p: argparse.ArgumentParser, cache: bool = True) -> None:
    p.add_argument("--dataset", help="directory of single-channel label maps <id>.<ext>")
    if cache:
        p.add_argument("--cache", help="histogram cache file (newline-delimited JSON)")
    p.add_argument("--num-classes", type=int, help="K; inferred from the data when omitted")
    p.add_argument("--ignore-index", type=int, default=DEFAULT_IGNORE_INDEX)


def _load(args, need_maps: bool = False) -> MaskDataset:
    dataset, cache = args.dataset, getattr(args, "cache", None)
    if bool(dataset) == bool(cache):
        raise UsageError("give exactly one of --dataset and --cache")
    path = Path(dataset or cache)
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    if cache:
        if need_maps:
            raise UsageError("this command needs dense label maps; use --dataset")
        records = read_histogram_cache(path)
        K = args.num_classes or 1 + max((max(r.histogram) for r in records if r.histogram), default=0)
        return MaskDataset(records, K)
    K = args.num_classes
    if K is None:
        raise UsageError("--num-classes is required with --dataset")
    return MaskDataset.from_directory(path, K, args.ignore_index)


def cmd_ingest(args) -> int:
    ds = _load(args)
    write_histogram_cache(ds.records, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return 0


def cmd_stats(args) -> int:
    ds = _load(args)
    stats = compute_class_stats(ds.records, ds.num_classes, args.mode)
    cov = stats.image_freq if args.mode == "image" else stats.pixel_freq
    rep = distribution_report(cov, stats.present, mode=args.mode)
    payload = rep.to_json() | {"num_records": len(ds), "num_classes": ds.num_classes,
                               "weights": [float(w) for w in stats.weights]}
    if args.out:
        with atomic_open(args.out) as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
    print(f"records={len(ds)} {rep.summary()}")
    return 0


def cmd_select(args) -> int:
    ds = _load(args)
    if (args.budget is None) == (args.ratio is None):
        raise UsageError("give exactly one of --budget and --ratio")
    budget = args.budget if args.budget is not None else budget_from_ratio(args.ratio, len(ds))
    if budget < 1:
        raise UsageError(f"budget must be at least 1 (got {budget})")
    if budget > len(ds):
        raise UsageError(f"budget {budget} exceeds dataset size {len(ds)}")
    stats = compute_class_stats(ds.records, ds.num_classes, args.mode)
    if args.strategy in ("kcenter", "herding"):
        if not args.features:
            raise UsageError(f"--strategy {args.strategy} needs --features")
        table = read_feature_table(args.features)
        if args.strategy == "kcenter":
            state = select_kcenter(table, budget, args.seed, ds.records, ds.num_classes)
        else:
            state = select_herding(table, budget, ds.records, ds.num_classes)
    elif args.strategy == "greedy":
        state = select_greedy(ds.records, stats, budget, args.temperature)
    elif args.strategy == "uniform":
        state = select_uniform(ds.records, stats, budget)
    else:
        state = select_random(ds.records, budget, args.seed or 0, ds.num_classes)
    manifest = state.to_manifest(considered=stats.present)
    manifest["seed"] = args.seed
    manifest["num_records"] = len(ds)
    if args.out:
        write_manifest(manifest, args.out)
    rep = distribution_report(state.coverage, stats.present)
    print(f"{args.strategy}: selected {len(state.selected)} of {len(ds)}; {rep.summary()}")
    return 0


def cmd_bank(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.dataset:
        cfg.dataset.path = args.dataset
    if args.num_classes:
        cfg.dataset.num_classes = args.num_classes
    if args.seed is not None:
        cfg.seed = args.seed
    if not cfg.dataset.path:
        raise UsageError("--dataset (or dataset.path in --config) is required")
    if not Path(cfg.dataset.path).is_dir():
        raise UsageError(f"{cfg.dataset.path}: no such directory")
    if cfg.dataset.num_classes < 1:
        raise UsageError("--num-classes is required")
    ds = MaskDataset.from_directory(cfg.dataset.path, cfg.dataset.num_classes, cfg.dataset.ignore_index)
    cfg.selection.budget = 1
    distiller = Distiller(ds, cfg)
    if args.images:
        pairs = []
        for rec in ds.records:
            img_path = Path(args.images) / f"{rec.id}.npy"
            if not img_path.exists():
                print(f"error: no image for record {rec.id}", file=sys.stderr)
                return 1
            image = np.load(img_path, allow_pickle=False)
            mask = ds.label_map(rec.id)
            if image.ndim != 3 or image.shape[1:] != mask.shape:
                print(f"error: geometry mismatch for {rec.id}: image {image.shape} vs mask {mask.shape}",
                      file=sys.stderr)
                return 1
            pairs.append((image.astype(np.float64), mask))
    elif args.toy_extractor:
        pairs = list(distiller.training_pairs())
    else:
        raise UsageError("give --images DIR or --toy-extractor")
    bank = build_feature_bank(pairs, distiller.comp.extractor, ds.num_classes, ds.ignore_index, args.jobs)
    write_feature_bank(bank, args.out)
    if read_feature_bank(args.out) != bank:
        print("error: feature bank failed to round-trip", file=sys.stderr)
        return 1
    print(f"bank: {len(bank.means)} (stage, class) entries over {len(pairs)} images -> {args.out}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.out:
        cfg.output = args.out
    if not cfg.dataset.path:
        raise ConfigError("dataset.path is required")
    if not Path(cfg.dataset.path).is_dir():
        raise UsageError(f"{cfg.dataset.path}: no such directory")
    cfg.validate()
    ds = MaskDataset.from_directory(cfg.dataset.path, cfg.dataset.num_classes, cfg.dataset.ignore_index)
    cfg.validate(len(ds))
    if args.dry_run:
        print(f"config ok: {len(ds)} records, budget {cfg.resolve_budget(len(ds))}")
        return 0
    if not cfg.output:
        raise ConfigError("output directory missing (config 'output' or --out)")
    distiller = Distiller(ds, cfg)
    done = [0]

    def progress(rid, status):
        done[0] += 1
        print(f"[{done[0]}] {rid}: {status}", flush=True)

    result = distiller.run(progress)
    summary = write_outputs(result, ds, cfg.output)
    sel = summary["selection"]
    print(f"distilled {summary['samples']} samples ({summary['failures']} failed) -> {cfg.output}")
    if sel:
        print(f"selection IF={sel['imbalance_factor']}")
    return 0 if not result.failures else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a histogram cache from a label-map directory")
    _add_source(p, cache=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="class frequencies and imbalance factor")
    _add_source(p)
    p.add_argument("--mode", choices=("image", "pixel"), default="image")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("select", help="budgeted mask selection")
    _add_source(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="greedy")
    p.add_argument("--budget", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--features", help="feature table for kcenter/herding")
    p.add_argument("--mode", choices=("image", "pixel"), default="image")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("bank", help="build the class-wise feature bank")
    _add_source(p, cache=False)
    p.add_argument("--config")
    p.add_argument("--images", help="directory of <id>.npy images (C, H, W)")
    p.add_argument("--toy-extractor", action="store_true", help="use the built-in extractor on mask-derived images")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("distill", help="run the full distillation pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_distill)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CacheParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, SelectionError, GuidanceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
