"""Command-line entry point: ``vase <verb> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 run failure,
4 too few surviving runs to aggregate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config, experiments
from .experiments import AggregationError, ExperimentConfig, ExperimentError
from .trainer import TrainConfig, run_training

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_AGGREGATE = 0, 2, 3, 4


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or a half-open range ``"0:5"``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":", 1))
            return tuple(range(lo, hi))
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise config.ConfigError(f"cannot parse seeds {text!r}") from exc


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise config.ConfigError(f"cannot parse number list {text!r}") from exc


def parse_bins(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise config.ConfigError(f"bins must look like 50x50, got {text!r}") from exc
    return h, w


def load_config(args) -> TrainConfig:
    cfg = config.load(args.config, TrainConfig()) if args.config else TrainConfig()
    if args.set:
        cfg = config.apply_overrides(cfg, dict(_split_assignment(a) for a in args.set))
    return cfg


def _split_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise config.ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _seeds(args, default=(0, 1, 2, 3, 4)) -> tuple[int, ...]:
    if args.seeds:
        return parse_seeds(args.seeds)
    if getattr(args, "seed", None) is not None:
        return (args.seed,)
    return default


# -- verbs ------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    if args.seeds is None:
        if args.seed is not None:
            cfg = config.apply_overrides(cfg, {"seed": args.seed})
        res = run_training(cfg, out)
        print(f"{out}: {len(res.metrics)} iterations, complete={res.complete}")
        return EXIT_OK if res.complete else EXIT_RUN
    modes = tuple(m.strip() for m in args.modes.split(",")) if args.modes else (cfg.surprise.mode,)
    exp = ExperimentConfig(base=cfg, modes=modes, seeds=parse_seeds(args.seeds), out_dir=out, workers=args.workers)
    result = experiments.run_experiment(exp)
    for mode in modes:
        print(f"{mode}: final median return {result.final_median(mode):.4f} -> {out / f'curves_{mode}.csv'}")
    failed = [r for rs in result.runs.values() for r in rs if not r.complete]
    return EXIT_RUN if failed else EXIT_OK


def cmd_sweep_delta(args) -> int:
    cfg = load_config(args)
    deltas = parse_floats(args.deltas) if args.deltas else experiments.DEFAULT_DELTAS
    res = experiments.delta_sweep(cfg, deltas, _seeds(args), Path(args.out), args.workers)
    for d, r in res.items():
        print(f"delta={d!r}: final median return {r.final_median('vase'):.4f}")
    failed = [x for r in res.values() for x in r.runs["vase"] if not x.complete]
    return EXIT_RUN if failed else EXIT_OK


def cmd_plane2d_explore(args) -> int:
    cfg = load_config(args)
    if args.config is None and not any(a.startswith("env.id") for a in args.set or []):
        cfg = config.apply_overrides(cfg, {"env.id": "plane2d"})
    modes = tuple(m.strip() for m in args.modes.split(",")) if args.modes else ("vase", "none")
    out = Path(args.out)
    table = experiments.explore_battery(cfg, modes, _seeds(args), args.step_cap, out, args.workers)
    for mode in modes:
        print(f"{mode}: {table[mode]} median {experiments.median_steps(table[mode], args.step_cap):.0f}")
    if args.bins:
        bins = parse_bins(args.bins)
        for mode in modes:
            for seed in _seeds(args):
                run = out / mode / f"seed{seed}"
                pos = experiments.read_positions(run / "transitions.csv")
                experiments.emit_heatmap(pos, bins, cfg.env.half_width, run / "heatmap")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    pos = experiments.read_positions(Path(args.transitions))
    grid = experiments.emit_heatmap(pos, parse_bins(args.bins), args.half_width, Path(args.out))
    print(f"{args.out}.csv / .pgm: {grid.shape[0]}x{grid.shape[1]} bins, {int(grid.sum())} steps")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    rows = experiments.aggregate_dirs([Path(d) for d in args.runs], Path(args.out))
    print(f"{args.out}: {len(rows)} iterations from {len(args.runs)} runs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vase", description="Surprise-driven exploration experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, seeds=True, workers=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True, help="output directory")
        if seeds:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--seeds", help="comma list or lo:hi range")
        if workers:
            sp.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="one run, or a seed battery with --seeds")
    common(t)
    t.add_argument("--modes", help="comma list of surprise modes for a battery")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep-delta", help="mountaincar VASE battery per delta")
    common(s)
    s.add_argument("--deltas", help="comma list (default 0,1e-6,1e-4,1e-2,1)")
    s.set_defaults(fn=cmd_sweep_delta)

    e = sub.add_parser("plane2d-explore", help="steps to first reward on plane2d")
    common(e)
    e.add_argument("--modes", help="comma list (default vase,none)")
    e.add_argument("--step-cap", type=int, default=300_000)
    e.add_argument("--bins", help="also write heatmaps, e.g. 50x50")
    e.set_defaults(fn=cmd_plane2d_explore)

    h = sub.add_parser("heatmap", help="bin a transition dump into CSV + PGM")
    h.add_argument("transitions", help="transitions.csv from a run")
    h.add_argument("--out", required=True, help="output prefix (writes .csv and .pgm)")
    h.add_argument("--bins", default="50x50")
    h.add_argument("--half-width", type=float, default=2.5)
    h.set_defaults(fn=cmd_heatmap)

    a = sub.add_parser("aggregate", help="median/quartile curves from run directories")
    a.add_argument("runs", nargs="+", help="run directories containing metrics.csv")
    a.add_argument("--out", required=True, help="output CSV path")
    a.set_defaults(fn=cmd_aggregate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AggregationError as exc:
        print(f"aggregation failed: {exc}", file=sys.stderr)
        return EXIT_AGGREGATE
    except (ExperimentError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
