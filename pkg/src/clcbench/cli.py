"""Command-line harness.

Subcommands: init-model, gen-dataset, build-caches, run,
analyze heatmap|overlap|cumulative, tune. Exit codes: 0 success,
1 config error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .dataset import save_dataset
from .errors import ConfigError, DataError
from .harness import (
    analyze,
    build_caches,
    dataset_from_spec,
    fmt,
    load_config_file,
    model_from_spec,
    run_experiment,
    tune,
)
from .model import save_weights, weights_fingerprint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clcbench",
        description="Chunk-level KV-cache reuse benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_dir=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
        if out_dir:
            p.add_argument("--out-dir", default=None, help="override the config's out_dir")

    p = sub.add_parser("init-model", help="draw seeded weights and save a CLCW file")
    add_common(p)
    p.add_argument("--out", default=None, help="weights path (default <out_dir>/model.clcw)")

    p = sub.add_parser("gen-dataset", help="write the synthetic dataset as JSONL")
    add_common(p)
    p.add_argument("--out", default=None, help="dataset path (default <out_dir>/dataset.jsonl)")

    p = sub.add_parser("build-caches", help="prefill and persist every needed chunk cache")
    add_common(p, out_dir=False)

    p = sub.add_parser("run", help="run the strategy matrix and emit CSV/JSON artifacts")
    add_common(p)
    p.add_argument("--jobs", type=int, default=None, help="parallel query workers")

    p = sub.add_parser("analyze", help="emit one analysis CSV")
    p.add_argument("kind", choices=["heatmap", "overlap", "cumulative"])
    add_common(p)

    p = sub.add_parser("tune", help="grid-search parameters on the held-out split")
    add_common(p)
    return parser


def _dispatch(args) -> int:
    config = load_config_file(args.config)
    if getattr(args, "out_dir", None):
        config = dataclasses.replace(config, out_dir=Path(args.out_dir))
    if getattr(args, "jobs", None):
        config = dataclasses.replace(config, jobs=max(1, args.jobs))

    if args.command == "init-model":
        spec = dict(config.model_spec)
        if args.seed is not None:
            spec["seed"] = args.seed
        w, cfg = model_from_spec(spec)
        out = Path(args.out) if args.out else config.out_dir / "model.clcw"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_weights(w, cfg, out)
        print(f"wrote {out} (fingerprint {weights_fingerprint(w, cfg)})")
        return 0

    if args.command == "gen-dataset":
        spec = dict(config.dataset_spec)
        if "synthetic" not in spec:
            raise ConfigError("gen-dataset needs a dataset.synthetic spec")
        if args.seed is not None:
            spec = {"synthetic": {**spec["synthetic"], "seed": args.seed}}
        items = dataset_from_spec(spec)
        out = Path(args.out) if args.out else config.out_dir / "dataset.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(items, out)
        print(f"wrote {len(items)} items to {out}")
        return 0

    if args.command == "build-caches":
        stats = build_caches(config)
        print(f"caches ready: {stats['misses']} built, {stats['hits']} reused")
        return 0

    if args.command == "run":
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        result = run_experiment(config)
        for pt, report in result.reports:
            adj = fmt(report.adjusted_f1_mean) if report.adjusted_f1_mean is not None else "n/a"
            params = f" [{pt.params_string()}]" if pt.params_string() else ""
            print(
                f"{pt.variant}{params}: plain F1 {fmt(report.plain_f1_mean)}, "
                f"adjusted F1 {adj} ({report.n_baseline_nonzero}/{report.n_total} baseline-nonzero)"
            )
        stats = result.cache_stats
        rate = "n/a" if stats["hit_rate"] is None else fmt(100.0 * stats["hit_rate"]) + "%"
        print(f"chunk cache: {stats['hits']} hits, {stats['misses']} misses ({rate} hit rate)")
        print(f"artifacts in {config.out_dir}")
        return 0

    if args.command == "analyze":
        out = analyze(args.kind, config)
        print(f"wrote {out}")
        return 0

    if args.command == "tune":
        best, out = tune(config)
        for variant, entry in best.items():
            params = entry["params"] or "(no parameters)"
            print(f"{variant}: best {params} (objective {fmt(entry['objective'])})")
        print(f"wrote {out}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaces invariant violations as exit 3
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
