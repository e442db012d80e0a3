"""Command-line entry point for dataset preparation, coarsening, training,
reporting, and representation analysis.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run writes a manifest before computing anything; reruns with an
identical manifest produce byte-identical result records. Wall-clock
timings are volatile and therefore go to a separate .timing.jsonl file
instead of the deterministic records.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coarsen import (
    AGGREGATIONS,
    METHODS,
    cache_key,
    precompute_coarsened_datasets,
    read_cache,
    serialize_coarsened,
)
from .tudata import ParseError, class_weights, parse_tudataset, size_split
from .train import (
    ExperimentConfig,
    NumericError,
    aggregate_records,
    append_records,
    cka_analysis,
    epoch_overhead,
    fit,
    read_records,
    train_single,
)

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3

ABLATION_RATIO_SETS = (
    [(r,) for r in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)]
    + [(0.8, 0.9), (0.5, 0.9), (0.3, 0.7)]
    + [tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))]
)


def _dataset_checksums(data_dir: Path, name: str) -> dict:
    sums = {}
    for path in sorted(data_dir.glob(f"{name}_*.txt")):
        sums[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return sums


def _write_manifest(out_dir: Path, command: str, config: dict, checksums: dict) -> str:
    # the hash covers only run-defining inputs, so reruns into a fresh
    # output directory still count as the same manifest
    hashed = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "dataset_checksums": checksums,
    }
    digest = hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]
    manifest = dict(hashed, output_dir=str(out_dir), manifest_hash=digest)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return digest


def _load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return ExperimentConfig.from_dict(raw)


def _load_dataset(config: ExperimentConfig):
    ds = parse_tudataset(config.data_dir, config.dataset)
    split = size_split(ds, seed=config.split_seed)
    return ds, split


def _build_cache(config: ExperimentConfig, ds, cache_path=None):
    if cache_path:
        cache = read_cache(cache_path)
        key = cache_key(ds.name, config.coarsener, config.aggregation, config.ratios, config.coarsen_seed)
        own = cache_key(
            cache.dataset_name, cache.method, cache.aggregation, cache.ratios, cache.seed
        )
        if key != own:
            raise ParseError(f"cache {cache_path} does not match the requested configuration")
        return cache
    return precompute_coarsened_datasets(
        ds, config.ratios, config.coarsener, config.aggregation, config.coarsen_seed
    )


# -- commands -----------------------------------------------------------


def cmd_prepare(args) -> int:
    ds = parse_tudataset(args.dataset_dir, args.name)
    split = size_split(ds, seed=args.seed)
    sizes = ds.sizes()
    pool = list(split.train_ids) + list(split.val_ids)
    report = {
        "dataset": ds.name,
        "num_graphs": len(ds),
        "num_classes": ds.num_classes,
        "feature_dim": ds.feature_dim,
        "avg_size_all": float(np.mean(sizes)),
        "small_pool": len(pool),
        "train": len(split.train_ids),
        "val": len(split.val_ids),
        "test": len(split.test_ids),
        "avg_size_small_pool": float(np.mean(sizes[pool])),
        "avg_size_test": float(np.mean(sizes[list(split.test_ids)])),
        "size_threshold_small": split.small_threshold,
        "size_threshold_large": split.large_threshold,
        "class_weights_train": class_weights(ds, split.train_ids).tolist(),
    }
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


def cmd_coarsen(args) -> int:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    for r in ratios:
        if not (0.0 < r < 1.0):
            print(f"error: ratio {r} outside (0, 1)", file=sys.stderr)
            return USAGE_ERROR
    ds = parse_tudataset(args.dataset_dir, args.name)
    out = Path(args.out)
    key = cache_key(ds.name, args.method, args.agg, ratios, args.seed)
    if out.exists():
        existing = read_cache(out)
        if (
            cache_key(
                existing.dataset_name,
                existing.method,
                existing.aggregation,
                existing.ratios,
                existing.seed,
            )
            == key
        ):
            print(f"cache up-to-date: {out}")
            return 0
    cd = precompute_coarsened_datasets(ds, ratios, args.method, args.agg, args.seed)
    data = serialize_coarsened(cd)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    print(f"wrote cache {out} ({len(data)} bytes, key {key[:12]})")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.no_reg:
        d = config.to_dict()
        d["lam"] = 0.0
        config = ExperimentConfig.from_dict(d)
    out_dir = Path(args.out)
    checksums = _dataset_checksums(Path(config.data_dir), config.dataset)
    manifest_hash = _write_manifest(out_dir, "train", config.to_dict(), checksums)
    ds, split = _load_dataset(config)
    cache = _build_cache(config, ds, args.cache) if config.lam > 0 else None
    records, timings = [], []
    for seed in config.seeds:
        result = train_single(config, ds, split, cache, seed)
        rec = result.record(config)
        rec["manifest"] = manifest_hash
        records.append(rec)
        timings.append(
            {"seed": seed, "epoch_seconds": result.epoch_seconds, "manifest": manifest_hash}
        )
        print(
            f"seed {seed}: best epoch {result.best_epoch}, "
            f"val mcc {result.history['val_mcc'][result.best_epoch]:.4f}, "
            f"test mcc {result.test_mcc:.4f}"
        )
    append_records(out_dir / "results.jsonl", records)
    append_records(out_dir / "results.timing.jsonl", timings)
    return 0


def cmd_report(args) -> int:
    records = read_records(args.results)
    rows = aggregate_records(records)
    header = f"{'dataset':<12} {'model':<6} {'reg':<5} {'runs':<5} {'mcc':>16}"
    print(header)
    print("-" * len(header))
    for row in rows:
        flag = "yes" if row["regularized"] else "no"
        print(
            f"{row['dataset']:<12} {row['model']:<6} {flag:<5} {row['runs']:<5} "
            f"{row['mean_mcc']:.4f} +/- {row['std_mcc']:.4f}"
        )
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("dataset,model,regularized,runs,mean_mcc,std_mcc\n")
            for row in rows:
                fh.write(
                    f"{row['dataset']},{row['model']},{int(row['regularized'])},"
                    f"{row['runs']},{row['mean_mcc']!r},{row['std_mcc']!r}\n"
                )
    return 0


def cmd_analyze_cka(args) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    checksums = _dataset_checksums(Path(config.data_dir), config.dataset)
    _write_manifest(out_dir, "analyze-cka", config.to_dict(), checksums)
    ds, split = _load_dataset(config)
    cache = _build_cache(config, ds, args.cache)
    ratios = tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))
    graphs = [ds.graphs[i] for i in split.test_ids]
    noreg_dict = config.to_dict()
    noreg_dict["lam"] = 0.0
    noreg_cfg = ExperimentConfig.from_dict(noreg_dict)
    curves = []
    for seed in config.seeds:
        reg_model, _ = fit(config, ds, split, cache, seed)
        noreg_model, _ = fit(noreg_cfg, ds, split, None, seed)
        curves.append(
            cka_analysis(
                reg_model,
                noreg_model,
                graphs,
                ratios,
                config.coarsener,
                config.aggregation,
                config.coarsen_seed,
            )
        )
    table = _cka_table(ratios, curves)
    (out_dir / "cka.txt").write_text(table)
    print(table, end="")
    return 0


def _cka_table(ratios, curves) -> str:
    lines = [f"{'ratio':<8} {'between':>10} {'within_reg':>12} {'within_noreg':>14}"]
    for r in ratios:
        bt = np.mean([c.between_models[r] for c in curves])
        wa = np.mean([c.within_a[r] for c in curves])
        wb = np.mean([c.within_b[r] for c in curves])
        lines.append(f"{r:<8} {bt:>10.4f} {wa:>12.4f} {wb:>14.4f}")
    bo = np.mean([c.between_models_original for c in curves])
    lines.append(f"{'orig':<8} {bo:>10.4f} {'1.0000':>12} {'1.0000':>14}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sizeshift",
        description="Size-shift regularization experiments for graph classification",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a dataset and report its size split")
    p.add_argument("dataset_dir")
    p.add_argument("name")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("coarsen", help="precompute a coarsening cache")
    p.add_argument("dataset_dir")
    p.add_argument("name")
    p.add_argument("--ratios", default="0.8,0.9")
    p.add_argument("--method", choices=METHODS, default="heavy-edge")
    p.add_argument("--agg", choices=AGGREGATIONS, default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("train", help="run seeded training from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--no-reg", action="store_true", help="force lam=0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate results.jsonl into a table")
    p.add_argument("--results", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("analyze-cka", help="per-ratio representation alignment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None)
    p.set_defaults(func=cmd_analyze_cka)

    p = sub.add_parser("ablate-ratios", help="sweep coarsening ratio sets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_ratios)

    p = sub.add_parser("ablate-coarsener", help="sweep coarsening methods")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_coarsener)

    p = sub.add_parser("overhead", help="measure the regularization time overhead")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=cmd_overhead)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        return args.func(args)
    except (ParseError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def cmd_ablate_ratios(args) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    checksums = _dataset_checksums(Path(config.data_dir), config.dataset)
    manifest_hash = _write_manifest(out_dir, "ablate-ratios", config.to_dict(), checksums)
    ds, split = _load_dataset(config)
    records = []
    for ratio_set in ABLATION_RATIO_SETS:
        d = config.to_dict()
        d["ratios"] = list(ratio_set)
        cfg = ExperimentConfig.from_dict(d)
        cache = precompute_coarsened_datasets(
            ds, cfg.ratios, cfg.coarsener, cfg.aggregation, cfg.coarsen_seed
        )
        for seed in cfg.seeds:
            result = train_single(cfg, ds, split, cache, seed)
            rec = result.record(cfg)
            rec["manifest"] = manifest_hash
            records.append(rec)
        label = ",".join(str(r) for r in ratio_set) if len(ratio_set) < 9 else "ALL"
        vals = [r["test_mcc"] for r in records if r["ratios"] == list(ratio_set)]
        print(f"ratios {label:<16} mcc {np.mean(vals):.4f} +/- {np.std(vals):.4f}")
    append_records(out_dir / "results.jsonl", records)
    return 0


def cmd_ablate_coarsener(args) -> int:
    config = _load_config(args.config)
    out_dir = Path(args.out)
    checksums = _dataset_checksums(Path(config.data_dir), config.dataset)
    manifest_hash = _write_manifest(out_dir, "ablate-coarsener", config.to_dict(), checksums)
    ds, split = _load_dataset(config)
    records = []
    for method in METHODS:
        d = config.to_dict()
        d["coarsener"] = method
        cfg = ExperimentConfig.from_dict(d)
        cache = precompute_coarsened_datasets(
            ds, cfg.ratios, cfg.coarsener, cfg.aggregation, cfg.coarsen_seed
        )
        for seed in cfg.seeds:
            result = train_single(cfg, ds, split, cache, seed)
            rec = result.record(cfg)
            rec["manifest"] = manifest_hash
            records.append(rec)
        vals = [r["test_mcc"] for r in records if r["coarsener"] == method]
        print(f"coarsener {method:<12} mcc {np.mean(vals):.4f} +/- {np.std(vals):.4f}")
    append_records(out_dir / "results.jsonl", records)
    return 0


def cmd_overhead(args) -> int:
    config = _load_config(args.config)
    ds, split = _load_dataset(config)
    cache = _build_cache(config, ds, None)
    ratio = epoch_overhead(config, ds, split, cache, epochs=args.epochs)
    print(f"regularized/unregularized epoch time: {ratio:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
