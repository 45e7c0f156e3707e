"""The training loop: rollouts scored by surprise, ELBO model fits, TRPO steps.

One iteration is

1. collect a batch of whole episodes with the current policy, scoring every
   transition against the posterior snapshot taken at iteration start;
2. fit the dynamics posterior on minibatches drawn from the replay pool;
3. take one TRPO step on the mixed reward r_e + eta * u;
4. refit the value baseline on the same batch.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bnn, config, envs
from .bnn import LikelihoodSpec, MiniBatch, PriorSpec, VariationalPosterior
from .numkit import NumkitError, Rng
from .policy import (
    GaussianPolicy,
    TrajectoryBatch,
    TrpoConfig,
    ValueBaseline,
    compute_advantages,
    fit_baseline,
    sample_action,
    save_policy,
    trpo_update,
)
from .surprise import SurpriseConfig, batch_surprise, intrinsic_reward, median_normalized

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    id: str = "mountaincar"
    horizon: int = 500
    # "auto" follows the task default (pendulum tasks on, plane2d/mountaincar off)
    normalize: str = "auto"
    half_width: float = 2.5
    goal: tuple[float, ...] = (1.0, 1.0)
    goal_radius: float = 0.05

    def spec(self) -> envs.EnvSpec:
        kw = dict(horizon=self.horizon)
        if self.normalize != "auto":
            kw["normalize"] = self.normalize.lower() in ("true", "1", "yes", "on")
        if self.id == "plane2d":
            kw.update(half_width=self.half_width, goal=tuple(self.goal), goal_radius=self.goal_radius)
        return envs.make_spec(self.id, **kw)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    lr: float = 1e-3
    minibatch: int = 32
    steps: int = 500
    elbo_samples: int = 1
    prior_sigma: float = 0.5
    init_mu_std: float = 0.05
    init_sigma_fraction: float = 0.1
    pool_capacity: int = 100_000
    pool_min_size: int = 500


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (32,)
    init_log_std: float = 0.0


@dataclass(frozen=True)
class BaselineConfig:
    hidden: tuple[int, ...] = (32,)
    lr: float = 5e-3
    steps: int = 100
    minibatch: int = 64


@dataclass(frozen=True)
class SurpriseSection:
    """Flat mirror of ``SurpriseConfig`` so every knob has a dotted key."""

    mode: str = "vase"
    delta: float = 1e-3
    eta: float = 1e-3
    n_samples: int = 10
    sigma_c: float = 5.0
    per_dimension: bool = False
    median_normalize: bool = False

    def build(self) -> SurpriseConfig:
        return SurpriseConfig(
            mode=self.mode,
            delta=self.delta,
            eta=self.eta,
            n_samples=self.n_samples,
            lik=LikelihoodSpec(self.sigma_c, self.per_dimension),
            median_normalize=self.median_normalize,
        )


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_iterations: int = 150
    batch_steps: int = 1000
    # 0 disables; otherwise training stops once this many env steps were taken
    step_cap: int = 0
    stop_on_first_reward: bool = False
    dump_transitions: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    surprise: SurpriseSection = field(default_factory=SurpriseSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        if self.n_iterations < 0:
            raise config.ConfigError("n_iterations must be >= 0")
        if self.batch_steps < self.env.horizon:
            raise config.ConfigError(
                f"batch_steps ({self.batch_steps}) must be >= horizon ({self.env.horizon})"
            )
        self.surprise.build()
        self.env.spec()


# -- replay pool --------------------------------------------------------------


class ReplayPool:
    """FIFO ring buffer of raw transitions."""

    def __init__(self, capacity: int, min_size: int, state_dim: int, action_dim: int):
        if capacity < 1 or min_size > capacity:
            raise TrainingError("pool needs capacity >= 1 and min_size <= capacity")
        self.capacity = capacity
        self.min_size = min_size
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.s_next = np.zeros((capacity, state_dim))
        self.r_ext = np.zeros(capacity)
        self.u = np.zeros(capacity)
        self.r_total = np.zeros(capacity)
        self.size = 0
        self._head = 0
        self.inserted = 0

    def add(self, s, a, s_next, r_ext, u, r_total) -> None:
        i = self._head
        self.s[i], self.a[i], self.s_next[i] = s, a, s_next
        self.r_ext[i], self.u[i], self.r_total[i] = r_ext, u, r_total
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def add_many(self, s, a, s_next, r_ext, u, r_total) -> None:
        for row in zip(s, a, s_next, r_ext, u, r_total):
            self.add(*row)

    @property
    def ready(self) -> bool:
        return self.size >= self.min_size

    def order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        start = self._head if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        if not self.ready:
            raise TrainingError(f"pool has {self.size} < {self.min_size} transitions")
        return rng.integers(0, self.size, n)


# -- rollouts -----------------------------------------------------------------


@dataclass
class Rollout:
    batch: TrajectoryBatch
    raw_obs: np.ndarray
    raw_next: np.ndarray
    model_actions: np.ndarray
    env_actions: np.ndarray
    rewards_ext: np.ndarray
    surprise: np.ndarray
    rewards_int: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    episode_returns: list[float]
    first_reward_step: int | None
    stopped: bool


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.env = cfg.env.spec()
        self.surprise_cfg = cfg.surprise.build()
        self.prior = PriorSpec(cfg.model.prior_sigma)
        root = Rng(cfg.seed)
        init_rng = root.spawn(0)
        self.rng_env = root.spawn(1)
        self.rng_policy = root.spawn(2)
        self.rng_model = root.spawn(3)
        self.rng_surprise = root.spawn(4)
        self.rng_baseline = root.spawn(5)
        ds, da = self.env.state_dim, self.env.action_dim
        self.policy = GaussianPolicy.create(ds, da, init_rng, cfg.policy.hidden, cfg.policy.init_log_std)
        self.baseline = ValueBaseline.create(ds, init_rng, cfg.baseline.hidden)
        mspec = bnn.model_spec(ds, da, cfg.model.hidden, cfg.model.activation)
        self.posterior = VariationalPosterior.initial(
            mspec, self.prior, init_rng, cfg.model.init_mu_std, cfg.model.init_sigma_fraction
        )
        self.moments = bnn.new_moments(self.posterior)
        self.pool = ReplayPool(cfg.model.pool_capacity, cfg.model.pool_min_size, ds, da)
        self.normalizer = envs.ObsNormalizer(ds)
        self.global_step = 0
        self.episode_count = 0
        self.first_reward_step: int | None = None

    # observation normalisation is a no-op for tasks that skip it
    def _norm_step(self, o):
        return envs.normalize(self.normalizer, o) if self.env.normalize else np.asarray(o, dtype=float)

    def _norm_read(self, norm: envs.ObsNormalizer, o):
        return norm.apply(o) if self.env.normalize else np.asarray(o, dtype=float)

    @property
    def _capped(self) -> bool:
        return self.cfg.step_cap > 0 and self.global_step >= self.cfg.step_cap

    def collect_batch(self) -> Rollout:
        cfg = self.cfg
        post = self.posterior.copy()
        model_norm = self.normalizer.copy()
        obs_n, acts, logps, raw, raw_next, rew_e, dones, ep_ids = [], [], [], [], [], [], [], []
        episodes, returns, tail_obs = [], [], []
        stopped = False
        n = 0
        while n < cfg.batch_steps and not stopped:
            st, o = envs.reset(self.env, self.rng_env)
            start = n
            ep_ret = 0.0
            while True:
                on = self._norm_step(o)
                a, lp = sample_action(self.policy, on, self.rng_policy)
                st, res = envs.step(self.env, st, envs.scale_action(self.env, a))
                obs_n.append(on)
                acts.append(a)
                logps.append(lp)
                raw.append(o)
                raw_next.append(res.observation)
                rew_e.append(res.reward_ext)
                dones.append(res.done)
                ep_ids.append(self.episode_count)
                ep_ret += res.reward_ext
                n += 1
                self.global_step += 1
                if res.reward_ext > 0 and self.first_reward_step is None:
                    self.first_reward_step = self.global_step
                    if cfg.stop_on_first_reward:
                        stopped = True
                if self._capped:
                    stopped = True
                o = res.observation
                if res.done or stopped:
                    break
            episodes.append((start, n))
            returns.append(ep_ret)
            # truncated by the horizon or the step cap: value the state reached
            tail_obs.append(None if res.info.get("terminal") else o)
            self.episode_count += 1

        raw = np.array(raw)
        raw_next = np.array(raw_next)
        acts = np.array(acts)
        model_actions = np.clip(acts, -1.0, 1.0)
        s_in = np.array([self._norm_read(model_norm, x) for x in raw])
        s_out = np.array([self._norm_read(model_norm, x) for x in raw_next])
        u = batch_surprise(
            post,
            s_in,
            model_actions,
            s_out,
            self.surprise_cfg,
            self.rng_surprise,
            prior=self.prior,
            lr=cfg.model.lr,
            moments=self.moments,
            pool_size=max(self.pool.size, 1),
        )
        if self.surprise_cfg.median_normalize and self.surprise_cfg.mode != "none":
            u = median_normalized(u)
        r_i = intrinsic_reward(u, self.surprise_cfg)
        rew_e = np.array(rew_e)
        r_total = rew_e + r_i
        self.pool.add_many(raw, model_actions, raw_next, rew_e, u, r_total)
        obs_n = np.array(obs_n)
        batch = TrajectoryBatch(
            obs=obs_n,
            actions=acts,
            rewards=r_total,
            log_probs=np.array(logps),
            episodes=episodes,
            values=self.baseline.predict(obs_n),
            rewards_ext=rew_e,
            bootstrap=self._tail_values(tail_obs),
        )
        return Rollout(
            batch=batch,
            raw_obs=raw,
            raw_next=raw_next,
            model_actions=model_actions,
            env_actions=np.array([envs.scale_action(self.env, a) for a in acts]),
            rewards_ext=rew_e,
            surprise=u,
            rewards_int=r_i,
            dones=np.array(dones),
            episode_ids=np.array(ep_ids),
            episode_returns=returns,
            first_reward_step=self.first_reward_step,
            stopped=stopped,
        )

    def _tail_values(self, tail_obs) -> np.ndarray:
        out = np.zeros(len(tail_obs))
        for i, o in enumerate(tail_obs):
            if o is not None:
                out[i] = self.baseline.predict(self._norm_read(self.normalizer, o))[0]
        return out

    def update_model(self) -> bool:
        """Run the configured ELBO steps; returns False when the pool is too small."""
        if self.surprise_cfg.mode == "none":
            return False
        if not self.pool.ready:
            log.info("replay pool has %d < %d transitions; skipping model update", self.pool.size, self.pool.min_size)
            return False
        mc = self.cfg.model
        norm = self.normalizer
        post = self.posterior
        for _ in range(mc.steps):
            idx = self.pool.sample(self.rng_model, mc.minibatch)
            s = self._norm_read(norm, self.pool.s[idx])
            s_next = self._norm_read(norm, self.pool.s_next[idx])
            batch = MiniBatch(np.hstack([s, self.pool.a[idx]]), s_next)
            post = bnn.elbo_update(
                post,
                batch,
                self.prior,
                self.surprise_cfg.lik,
                self.rng_model,
                mc.lr,
                self.moments,
                pool_size=self.pool.size,
                n_samples=mc.elbo_samples,
            )
        self.posterior = post
        return True

    def update_policy(self, roll: Rollout):
        b = roll.batch
        adv, ret = compute_advantages(b, self.cfg.trpo)
        self.policy, stats = trpo_update(self.policy, b.obs, b.actions, adv, b.log_probs, self.cfg.trpo)
        return stats, ret

    def update_baseline(self, roll: Rollout, targets: np.ndarray) -> float:
        bc = self.cfg.baseline
        return fit_baseline(self.baseline, roll.batch.obs, targets, self.rng_baseline, bc.steps, bc.lr, bc.minibatch)

    def iteration(self, i: int) -> tuple[dict, dict, Rollout]:
        t0 = time.perf_counter()
        roll = self.collect_batch()
        t1 = time.perf_counter()
        updated = False
        if not roll.stopped:
            updated = self.update_model()
        t2 = time.perf_counter()
        stats, ret = (None, None)
        ev = float("nan")
        if not roll.stopped:
            stats, ret = self.update_policy(roll)
        t3 = time.perf_counter()
        if ret is not None:
            ev = self.update_baseline(roll, ret)
        t4 = time.perf_counter()
        row = {
            "iteration": i,
            "env_steps": self.global_step,
            "episodes": len(roll.episode_returns),
            "avg_return_ext": float(np.mean(roll.episode_returns)),
            "mean_surprise": float(np.mean(roll.surprise)),
            "mean_intrinsic": float(np.mean(roll.rewards_int)),
            "posterior_entropy": bnn.posterior_entropy(self.posterior),
            "model_kl_prior": bnn.kl_to_prior(self.posterior, self.prior),
            "model_updated": int(updated),
            "trpo_accepted": int(stats.accepted) if stats else 0,
            "policy_kl": stats.kl if stats else 0.0,
            "surrogate_improvement": stats.improvement if stats else 0.0,
            "baseline_explained_variance": ev,
            "first_reward_step": self.first_reward_step if self.first_reward_step is not None else "",
        }
        timing = {
            "iteration": i,
            "collect_s": t1 - t0,
            "model_s": t2 - t1,
            "policy_s": t3 - t2,
            "baseline_s": t4 - t3,
        }
        return row, timing, roll


# -- run artifacts ------------------------------------------------------------

TRANSITION_FIELDS = ("episode", "t", "raw_obs", "norm_obs", "action", "r_e", "r_i", "done")


@dataclass
class RunResult:
    config: TrainConfig
    metrics: list[dict]
    timings: list[dict]
    complete: bool
    first_reward_step: int | None
    error: str | None = None
    out_dir: Path | None = None
    trainer: Trainer | None = field(default=None, repr=False)

    def returns(self) -> list[float]:
        return [m["avg_return_ext"] for m in self.metrics]


def fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], header: list[str] | None = None) -> None:
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row[k]) for k in header])


METRIC_FIELDS = [
    "iteration",
    "env_steps",
    "episodes",
    "avg_return_ext",
    "mean_surprise",
    "mean_intrinsic",
    "posterior_entropy",
    "model_kl_prior",
    "model_updated",
    "trpo_accepted",
    "policy_kl",
    "surrogate_improvement",
    "baseline_explained_variance",
    "first_reward_step",
]


class TransitionWriter:
    def __init__(self, path: Path, state_dim: int, action_dim: int):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.header = (
            ["episode", "t"]
            + [f"raw_obs_{i}" for i in range(state_dim)]
            + [f"norm_obs_{i}" for i in range(state_dim)]
            + [f"action_{i}" for i in range(action_dim)]
            + ["r_e", "r_i", "done"]
        )
        self.w.writerow(self.header)

    def write(self, roll: Rollout) -> None:
        b = roll.batch
        for s, e in b.episodes:
            for t, k in enumerate(range(s, e)):
                self.w.writerow(
                    [int(roll.episode_ids[k]), t]
                    + [fmt(float(x)) for x in roll.raw_obs[k]]
                    + [fmt(float(x)) for x in b.obs[k]]
                    + [fmt(float(x)) for x in roll.env_actions[k]]
                    + [fmt(float(roll.rewards_ext[k])), fmt(float(roll.rewards_int[k])), int(roll.dones[k])]
                )

    def close(self):
        self.fh.close()


def run_training(cfg: TrainConfig, out_dir: str | Path | None = None) -> RunResult:
    """Run ``cfg.n_iterations`` iterations (or until a stop condition).

    With ``out_dir`` the artifact directory receives ``config.cfg``,
    ``metrics.csv``, ``timings.csv``, ``status.json``, checkpoints and,
    if enabled, ``transitions.csv``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.cfg", cfg)
    trainer = Trainer(cfg)
    writer = None
    if out is not None and cfg.dump_transitions:
        writer = TransitionWriter(out / "transitions.csv", trainer.env.state_dim, trainer.env.action_dim)
    metrics, timings = [], []
    error = None
    try:
        for i in range(cfg.n_iterations):
            row, timing, roll = trainer.iteration(i)
            metrics.append(row)
            timings.append(timing)
            if writer is not None:
                writer.write(roll)
            if roll.stopped:
                break
    except (NumkitError, TrainingError, FloatingPointError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.warning("run (seed %d) aborted: %s", cfg.seed, error)
    finally:
        if writer is not None:
            writer.close()
    result = RunResult(cfg, metrics, timings, error is None, trainer.first_reward_step, error, out, trainer)
    if out is not None:
        write_csv(out / "metrics.csv", metrics, METRIC_FIELDS)
        write_csv(out / "timings.csv", timings, ["iteration", "collect_s", "model_s", "policy_s", "baseline_s"])
        status = {
            "complete": result.complete,
            "error": error,
            "iterations": len(metrics),
            "env_steps": trainer.global_step,
            "first_reward_step": trainer.first_reward_step,
        }
        (out / "status.json").write_text(json.dumps(status, indent=1, sort_keys=True) + "\n")
        bnn.save_posterior(out / "posterior.json", trainer.posterior, trainer.prior, trainer.surprise_cfg.lik)
        save_policy(out / "policy.json", trainer.policy)
    return result
