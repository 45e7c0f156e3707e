"""Seed batteries, cross-seed aggregation and the plane2d / delta-sweep studies.

Every output is a pure function of (config, seeds): runs are merged in input
order whatever the worker schedule, and wall-clock data stays in
``timings.csv`` files that no aggregate reads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config
from .trainer import TrainConfig, fmt, run_training

log = logging.getLogger(__name__)

CAPPED = "capped"
DEFAULT_DELTAS = (0.0, 1e-6, 1e-4, 1e-2, 1.0)
# "linear" is numpy's inclusive interpolation between order statistics
QUANTILE_METHOD = "linear"


class ExperimentError(RuntimeError):
    pass


class AggregationError(ExperimentError):
    """Too few surviving runs to aggregate."""


@dataclass(frozen=True)
class ExperimentConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = ("vase",)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: Path | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise config.ConfigError("seed battery must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise config.ConfigError(f"seeds must be distinct, got {list(self.seeds)}")
        if not self.modes:
            raise config.ConfigError("at least one surprise mode is required")
        if self.workers < 1:
            raise config.ConfigError("workers must be >= 1")

    def run_configs(self, mode: str) -> list[TrainConfig]:
        return [config.apply_overrides(self.base, {"surprise.mode": mode, "seed": s}) for s in self.seeds]


@dataclass
class RunSummary:
    seed: int
    mode: str
    complete: bool
    returns: list[float]
    first_reward_step: int | None
    env_steps: int
    error: str | None


def _run_one(job: tuple[TrainConfig, str | None]) -> RunSummary:
    cfg, out = job
    res = run_training(cfg, out)
    steps = res.trainer.global_step if res.trainer is not None else 0
    return RunSummary(cfg.seed, cfg.surprise.mode, res.complete, res.returns(), res.first_reward_step, steps, res.error)


def run_battery(cfgs: list[TrainConfig], out_dirs: list[Path | None], workers: int = 1) -> list[RunSummary]:
    """Run every config; results come back in input order."""
    jobs = [(c, str(d) if d is not None else None) for c, d in zip(cfgs, out_dirs)]
    if workers == 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def required_survivors(n_seeds: int) -> int:
    return min(3, n_seeds)


def surviving(runs: list[RunSummary], n_requested: int) -> list[RunSummary]:
    ok = [r for r in runs if r.complete]
    for r in runs:
        if not r.complete:
            log.warning("excluding %s seed %d from aggregation: %s", r.mode, r.seed, r.error)
    need = required_survivors(n_requested)
    if len(ok) < need:
        raise AggregationError(f"only {len(ok)} of {n_requested} runs survived; aggregation needs {need}")
    return ok


def aggregate_curves(curves: list[list[float]]) -> list[dict]:
    """Per-iteration median and quartiles across runs (truncated to the shortest run)."""
    if not curves:
        raise AggregationError("no runs to aggregate")
    n = min(len(c) for c in curves)
    data = np.array([c[:n] for c in curves], dtype=np.float64).reshape(len(curves), n)
    rows = []
    for i in range(n):
        # sorted first so every statistic is independent of seed order
        col = np.sort(data[:, i])
        q25, med, q75 = np.percentile(col, [25, 50, 75], method=QUANTILE_METHOD)
        rows.append({"iteration": i, "median": float(med), "q25": float(q25), "q75": float(q75), "mean": float(col.mean())})
    return rows


CURVE_FIELDS = ["iteration", "median", "q25", "q75"]


def write_rows(path: Path, rows: list[dict], header: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row[k]) for k in header])


def final_score(curve: list[float], window: int = 10) -> float:
    """Mean of the last ``window`` iterations of one run's return curve."""
    if not curve:
        return math.nan
    return float(np.mean(curve[-window:]))


@dataclass
class ExperimentResult:
    runs: dict[str, list[RunSummary]]
    curves: dict[str, list[dict]]
    out_dir: Path | None

    def final_median(self, mode: str, window: int = 10) -> float:
        return float(np.median([final_score(r.returns, window) for r in self.runs[mode] if r.complete]))


def run_experiment(exp: ExperimentConfig) -> ExperimentResult:
    """One run per (mode, seed); writes ``<mode>/seed<k>/`` artifacts and ``curves_<mode>.csv``."""
    out = Path(exp.out_dir) if exp.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "base.cfg", exp.base)
    cfgs, dirs, owners = [], [], []
    for mode in exp.modes:
        for cfg in exp.run_configs(mode):
            cfgs.append(cfg)
            dirs.append(out / mode / f"seed{cfg.seed}" if out is not None else None)
            owners.append(mode)
    results = run_battery(cfgs, dirs, exp.workers)
    runs = {m: [r for r, o in zip(results, owners) if o == m] for m in exp.modes}
    curves = {}
    for mode in exp.modes:
        ok = surviving(runs[mode], len(exp.seeds))
        curves[mode] = aggregate_curves([r.returns for r in ok])
        if out is not None:
            write_rows(out / f"curves_{mode}.csv", curves[mode], CURVE_FIELDS)
    return ExperimentResult(runs, curves, out)


# -- plane2d: steps to first reward ---------------------------------------------


def first_reward_config(base: TrainConfig, mode: str, seed: int, step_cap: int) -> TrainConfig:
    if base.env.id != "plane2d":
        raise config.ConfigError(f"steps_to_first_reward needs env.id = plane2d, got {base.env.id}")
    iters = math.ceil(step_cap / base.batch_steps) + 1
    return config.apply_overrides(
        base,
        {
            "surprise.mode": mode,
            "seed": seed,
            "step_cap": step_cap,
            "stop_on_first_reward": True,
            "dump_transitions": True,
            "n_iterations": iters,
        },
    )


def steps_to_first_reward(base: TrainConfig, mode: str, seed: int, step_cap: int, out_dir: Path | None = None):
    """Global step index of the first extrinsic reward, or ``CAPPED``.

    The visited trajectory is dumped to ``out_dir/transitions.csv`` either way.
    """
    summary = _run_one((first_reward_config(base, mode, seed, step_cap), str(out_dir) if out_dir else None))
    if not summary.complete:
        raise ExperimentError(f"{mode} seed {seed} failed: {summary.error}")
    return summary.first_reward_step if summary.first_reward_step is not None else CAPPED


def median_steps(values: list, step_cap: int) -> float:
    """Median with capped runs counted at the cap (a lower bound on their true value)."""
    return float(np.median([step_cap if v == CAPPED else v for v in values]))


def explore_battery(
    base: TrainConfig, modes, seeds, step_cap: int, out_dir: Path | None = None, workers: int = 1
) -> dict[str, list]:
    """``steps_to_first_reward`` for every (mode, seed); writes ``first_reward.csv``."""
    cfgs, dirs, keys = [], [], []
    for mode in modes:
        for seed in seeds:
            cfgs.append(first_reward_config(base, mode, seed, step_cap))
            dirs.append(Path(out_dir) / mode / f"seed{seed}" if out_dir is not None else None)
            keys.append(mode)
    results = run_battery(cfgs, dirs, workers)
    failed = [r for r in results if not r.complete]
    if failed:
        raise ExperimentError("; ".join(f"{r.mode} seed {r.seed}: {r.error}" for r in failed))
    table = {m: [] for m in modes}
    rows = []
    for mode, r in zip(keys, results):
        v = r.first_reward_step if r.first_reward_step is not None else CAPPED
        table[mode].append(v)
        rows.append({"mode": mode, "seed": r.seed, "first_reward_step": v, "env_steps": r.env_steps})
    if out_dir is not None:
        write_rows(Path(out_dir) / "first_reward.csv", rows, ["mode", "seed", "first_reward_step", "env_steps"])
        summary = [{"mode": m, "median_steps": median_steps(table[m], step_cap), "step_cap": step_cap} for m in modes]
        write_rows(Path(out_dir) / "first_reward_summary.csv", summary, ["mode", "median_steps", "step_cap"])
    return table


# -- heatmaps -------------------------------------------------------------------


def read_positions(path: Path) -> np.ndarray:
    """(x, y) of every recorded step in a transition dump."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "raw_obs_0" not in reader.fieldnames or "raw_obs_1" not in reader.fieldnames:
            raise ExperimentError(f"{path}: not a 2-D transition dump")
        pts = [(float(r["raw_obs_0"]), float(r["raw_obs_1"])) for r in reader]
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def heatmap_grid(positions: np.ndarray, bins: tuple[int, int], half_width: float) -> np.ndarray:
    """Visit counts; row 0 is the top (largest y), column 0 the left edge (smallest x)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(positions) == 0:
        raise ExperimentError("empty trajectory")
    h, w = bins
    if h < 1 or w < 1:
        raise ExperimentError(f"bins must be positive, got {bins}")
    span = 2.0 * half_width
    col = np.clip(np.floor((positions[:, 0] + half_width) / span * w).astype(int), 0, w - 1)
    row = h - 1 - np.clip(np.floor((positions[:, 1] + half_width) / span * h).astype(int), 0, h - 1)
    grid = np.zeros((h, w), dtype=np.int64)
    np.add.at(grid, (row, col), 1)
    return grid


def pgm_bytes(grid: np.ndarray) -> bytes:
    """Binary greyscale PGM; intensity 255 * log(1+count) / log(1+max)."""
    h, w = grid.shape
    top = math.log1p(float(grid.max()))
    scaled = np.zeros(grid.shape) if top == 0 else np.log1p(grid.astype(np.float64)) / top
    pixels = np.rint(255.0 * scaled).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def emit_heatmap(positions: np.ndarray, bins: tuple[int, int], half_width: float, out_prefix: Path) -> np.ndarray:
    """Write ``<prefix>.csv`` (counts) and ``<prefix>.pgm``; returns the grid."""
    grid = heatmap_grid(positions, bins, half_width)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(out_prefix.with_suffix(".csv"), "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(grid.tolist())
    out_prefix.with_suffix(".pgm").write_bytes(pgm_bytes(grid))
    return grid


# -- delta sweep ------------------------------------------------------------------


def delta_label(delta: float) -> str:
    return f"delta={delta!r}"


def delta_sweep(
    base: TrainConfig, deltas=DEFAULT_DELTAS, seeds=(0, 1, 2, 3, 4), out_dir: Path | None = None, workers: int = 1
) -> dict[float, ExperimentResult]:
    """VASE battery per delta; writes ``delta_sweep.csv`` with one column group per delta."""
    if base.env.id != "mountaincar":
        raise config.ConfigError(f"delta sweep runs on mountaincar, got env.id = {base.env.id}")
    if len(set(deltas)) != len(deltas) or not deltas:
        raise config.ConfigError("deltas must be nonempty and distinct")
    cfgs, dirs, owners = [], [], []
    for d in deltas:
        for s in seeds:
            cfgs.append(config.apply_overrides(base, {"surprise.mode": "vase", "surprise.delta": d, "seed": s}))
            dirs.append(Path(out_dir) / delta_label(d) / f"seed{s}" if out_dir is not None else None)
            owners.append(d)
    results = run_battery(cfgs, dirs, workers)
    out: dict[float, ExperimentResult] = {}
    for d in deltas:
        runs = [r for r, o in zip(results, owners) if o == d]
        ok = surviving(runs, len(seeds))
        out[d] = ExperimentResult({"vase": runs}, {"vase": aggregate_curves([r.returns for r in ok])}, None)
    if out_dir is not None:
        n = min(len(out[d].curves["vase"]) for d in deltas)
        header = ["iteration"]
        for d in deltas:
            header += [f"{delta_label(d)}:{k}" for k in ("mean", "median", "q25", "q75")]
        rows = []
        for i in range(n):
            row = {"iteration": i}
            for d in deltas:
                c = out[d].curves["vase"][i]
                for k in ("mean", "median", "q25", "q75"):
                    row[f"{delta_label(d)}:{k}"] = c[k]
            rows.append(row)
        write_rows(Path(out_dir) / "delta_sweep.csv", rows, header)
    return out


# -- aggregation of existing run directories ----------------------------------------


def read_returns(run_dir: Path) -> tuple[list[float], bool]:
    run_dir = Path(run_dir)
    with open(run_dir / "metrics.csv", newline="") as fh:
        returns = [float(r["avg_return_ext"]) for r in csv.DictReader(fh)]
    status = run_dir / "status.json"
    complete = True
    if status.exists():
        complete = bool(json.loads(status.read_text()).get("complete", False))
    return returns, complete


def aggregate_dirs(run_dirs: list[Path], out_csv: Path) -> list[dict]:
    """Aggregate finished run directories; incomplete runs are excluded with a warning."""
    curves = []
    for d in sorted(Path(p) for p in run_dirs):
        returns, complete = read_returns(d)
        if complete:
            curves.append(returns)
        else:
            log.warning("excluding incomplete run %s", d)
    need = required_survivors(len(run_dirs))
    if len(curves) < need:
        raise AggregationError(f"only {len(curves)} of {len(run_dirs)} runs complete; need {need}")
    rows = aggregate_curves(curves)
    write_rows(Path(out_csv), rows, CURVE_FIELDS)
    return rows
