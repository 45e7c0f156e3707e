"""Gaussian MLP policy, GAE advantages, TRPO update and value baseline.

Policy actions live in the unit box; the trainer rescales them onto each
environment's action bounds. The standard deviation is a learned,
state-independent vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import (
    AdamState,
    MlpSpec,
    NonFiniteError,
    NumkitError,
    Rng,
    adam_step,
    init_mlp_params,
    mlp_forward,
    mlp_gradient,
    mlp_jvp,
)

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class PolicyError(NumkitError):
    pass


@dataclass
class GaussianPolicy:
    spec: MlpSpec
    params: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        self.log_std = np.asarray(self.log_std, dtype=np.float64).reshape(-1).copy()
        if self.params.shape != (self.spec.n_params,):
            raise PolicyError(f"policy params: expected {self.spec.n_params}, got {self.params.shape}")
        if self.log_std.shape != (self.spec.n_out,):
            raise PolicyError(f"log_std: expected {self.spec.n_out}, got {self.log_std.shape}")
        if not np.all(np.isfinite(self.log_std)):
            raise PolicyError("log_std must be finite")

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, rng: Rng, hidden=(32,), init_log_std: float = 0.0):
        spec = MlpSpec((obs_dim, *hidden, act_dim), "tanh")
        return cls(spec, init_mlp_params(spec, rng, output_scale=0.01), np.full(act_dim, init_log_std))

    @property
    def n_flat(self) -> int:
        return self.spec.n_params + self.spec.n_out

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params, self.log_std])

    def with_flat(self, flat: np.ndarray) -> "GaussianPolicy":
        n = self.spec.n_params
        return GaussianPolicy(self.spec, flat[:n], flat[n:])

    def mean(self, obs) -> np.ndarray:
        return mlp_forward(self.spec, self.params, obs)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.spec, self.params, self.log_std)


def gaussian_log_prob(actions, means, log_std) -> np.ndarray:
    z = (np.asarray(actions) - means) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * means.shape[-1] * LOG_2PI


def sample_action(pol: GaussianPolicy, obs, rng: Rng) -> tuple[np.ndarray, float]:
    mu = pol.mean(obs)
    a = mu + np.exp(pol.log_std) * rng.normal(mu.shape)
    return a, float(gaussian_log_prob(a, mu, pol.log_std))


def log_prob(pol: GaussianPolicy, obs, actions) -> np.ndarray:
    return gaussian_log_prob(actions, pol.mean(obs), pol.log_std)


# -- batches and advantages ---------------------------------------------------


@dataclass
class TrajectoryBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    # half-open [start, end) row ranges, one per episode
    episodes: list[tuple[int, int]]
    values: np.ndarray | None = None
    rewards_ext: np.ndarray | None = None
    # value of the state after each episode's last step; 0 when it ended in a true terminal
    bootstrap: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.obs)
        for name in ("actions", "rewards", "log_probs"):
            if len(getattr(self, name)) != n:
                raise PolicyError(f"batch field {name} misaligned with observations")
        if self.values is not None and len(self.values) != n:
            raise PolicyError("value predictions misaligned with observations")
        if self.bootstrap is not None and len(self.bootstrap) != len(self.episodes):
            raise PolicyError("need one bootstrap value per episode")
        covered = sum(e - s for s, e in self.episodes)
        if covered != n:
            raise PolicyError("episode segments must cover the batch exactly")

    def __len__(self) -> int:
        return len(self.obs)


@dataclass(frozen=True)
class TrpoConfig:
    max_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    line_search_backtracks: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.97

    def __post_init__(self):
        if not self.max_kl > 0:
            raise PolicyError("max_kl must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise PolicyError("gamma must lie in (0, 1]")


def discounted_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    out = np.zeros(len(x))
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + discount * acc
        out[t] = acc
    return out


def compute_advantages(
    batch: TrajectoryBatch, cfg: TrpoConfig, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """GAE(gamma, lambda) advantages and discounted return targets.

    A segment cut by a time limit continues from ``batch.bootstrap``; without
    it every segment end is terminal.
    """
    if len(batch) == 0:
        raise PolicyError("cannot compute advantages of an empty batch")
    values = batch.values if batch.values is not None else np.zeros(len(batch))
    adv = np.zeros(len(batch))
    ret = np.zeros(len(batch))
    tails = batch.bootstrap if batch.bootstrap is not None else np.zeros(len(batch.episodes))
    for (s, e), tail in zip(batch.episodes, tails):
        r = batch.rewards[s:e]
        v = values[s:e]
        v_next = np.append(v[1:], tail)
        td = r + cfg.gamma * v_next - v
        adv[s:e] = discounted_cumsum(td, cfg.gamma * cfg.gae_lambda)
        r_tail = r.copy()
        r_tail[-1] += cfg.gamma * tail
        ret[s:e] = discounted_cumsum(r_tail, cfg.gamma)
    if normalize:
        adv = normalize_advantages(adv)
    return adv, ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    std = adv.std()
    return adv / std if std >= 1e-8 else adv


# -- TRPO ---------------------------------------------------------------------


def surrogate(pol: GaussianPolicy, obs, actions, advantages, old_log_probs) -> float:
    ratio = np.exp(log_prob(pol, obs, actions) - old_log_probs)
    return float(np.mean(ratio * advantages))


def surrogate_grad(pol: GaussianPolicy, obs, actions, advantages, old_log_probs) -> np.ndarray:
    """Gradient of the importance-weighted surrogate w.r.t. (params, log_std)."""
    n = len(obs)
    mu = pol.mean(obs)
    inv_var = np.exp(-2.0 * pol.log_std)
    ratio = np.exp(gaussian_log_prob(actions, mu, pol.log_std) - old_log_probs)
    w = (ratio * advantages / n)[:, None]
    diff = actions - mu
    g_params = mlp_gradient(pol.spec, pol.params, obs, w * diff * inv_var)
    g_log_std = np.sum(w * (diff * diff * inv_var - 1.0), axis=0)
    return np.concatenate([g_params, g_log_std])


def mean_kl(old: GaussianPolicy, new: GaussianPolicy, obs) -> float:
    """Average over states of KL(old(.|s) || new(.|s))."""
    mu_o, mu_n = old.mean(obs), new.mean(obs)
    var_o, var_n = np.exp(2 * old.log_std), np.exp(2 * new.log_std)
    kl = np.sum(new.log_std - old.log_std + (var_o + (mu_o - mu_n) ** 2) / (2 * var_n) - 0.5, axis=-1)
    return float(np.mean(kl))


def fisher_vector_product(pol: GaussianPolicy, obs, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Hessian of the mean KL at the current policy, times ``v`` (plus damping)."""
    n_p = pol.spec.n_params
    v_params, v_log_std = v[:n_p], v[n_p:]
    jv = mlp_jvp(pol.spec, pol.params, obs, v_params)
    inv_var = np.exp(-2.0 * pol.log_std)
    fv_params = mlp_gradient(pol.spec, pol.params, obs, jv * inv_var) / len(obs)
    fv_log_std = 2.0 * v_log_std
    return np.concatenate([fv_params, fv_log_std]) + damping * v


def conjugate_gradient(matvec, b: np.ndarray, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr < tol:
            break
        Ap = matvec(p)
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class TrpoStats:
    accepted: bool
    surrogate_before: float
    surrogate_after: float
    kl: float
    backtracks: int

    @property
    def improvement(self) -> float:
        return self.surrogate_after - self.surrogate_before


def trpo_update(
    pol: GaussianPolicy, obs, actions, advantages, old_log_probs, cfg: TrpoConfig
) -> tuple[GaussianPolicy, TrpoStats]:
    """One natural-gradient step constrained to mean KL <= ``cfg.max_kl``.

    Returns the unchanged policy when no line-search candidate is acceptable.
    Raises ``NonFiniteError`` (policy untouched) on a non-finite gradient.
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if len(obs) == 0:
        raise PolicyError("empty batch")
    base = surrogate(pol, obs, actions, advantages, old_log_probs)
    g = surrogate_grad(pol, obs, actions, advantages, old_log_probs)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("trpo surrogate gradient")
    unchanged = TrpoStats(False, base, base, 0.0, 0)
    if not np.any(g):
        return pol, unchanged

    def fvp(v):
        return fisher_vector_product(pol, obs, v, cfg.cg_damping)

    direction = conjugate_gradient(fvp, g, cfg.cg_iters)
    shs = float(direction @ fvp(direction))
    if not shs > 0 or not np.isfinite(shs):
        return pol, unchanged
    full_step = math.sqrt(2.0 * cfg.max_kl / shs) * direction
    flat = pol.flat()
    for k in range(cfg.line_search_backtracks):
        cand = pol.with_flat(flat + 0.5**k * full_step)
        new_val = surrogate(cand, obs, actions, advantages, old_log_probs)
        kl = mean_kl(pol, cand, obs)
        if new_val - base >= 0 and kl <= cfg.max_kl and np.isfinite(new_val):
            return cand, TrpoStats(True, base, new_val, kl, k)
    return pol, unchanged


# -- value baseline -----------------------------------------------------------


@dataclass
class ValueBaseline:
    spec: MlpSpec
    params: np.ndarray
    moments: AdamState = field(default=None)

    def __post_init__(self):
        if self.moments is None:
            self.moments = AdamState.zeros(self.spec.n_params)

    @classmethod
    def create(cls, obs_dim: int, rng: Rng, hidden=(32,)) -> "ValueBaseline":
        spec = MlpSpec((obs_dim, *hidden, 1), "relu")
        return cls(spec, init_mlp_params(spec, rng, output_scale=0.0))

    def predict(self, obs) -> np.ndarray:
        return mlp_forward(self.spec, self.params, np.atleast_2d(obs))[:, 0]


def explained_variance(pred: np.ndarray, targets: np.ndarray) -> float:
    var_t = float(np.var(targets))
    if var_t == 0.0:
        return 1.0 if np.allclose(pred, targets) else float("-inf")
    return 1.0 - float(np.var(targets - pred)) / var_t


def fit_baseline(
    value: ValueBaseline,
    obs,
    targets,
    rng: Rng,
    steps: int = 100,
    lr: float = 5e-3,
    minibatch: int = 64,
) -> float:
    """Squared-error regression with Adam; updates ``value`` in place.

    Returns the explained variance on the batch after fitting.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    n = len(obs)
    for _ in range(steps):
        idx = rng.integers(0, n, min(minibatch, n))
        x, y = obs[idx], targets[idx]
        pred = mlp_forward(value.spec, value.params, x)[:, 0]
        g_out = (2.0 / len(idx)) * (pred - y)[:, None]
        grad = mlp_gradient(value.spec, value.params, x, g_out)
        value.params = adam_step(value.params, grad, value.moments, lr)
    return explained_variance(value.predict(obs), targets)


# -- checkpoints --------------------------------------------------------------


def save_policy(path: str | Path, pol: GaussianPolicy) -> None:
    record = {
        "format": "vase-policy",
        "version": CHECKPOINT_VERSION,
        "spec": {"layer_sizes": list(pol.spec.layer_sizes), "hidden_activation": pol.spec.hidden_activation},
        "params": pol.params.tolist(),
        "log_std": pol.log_std.tolist(),
    }
    Path(path).write_text(json.dumps(record))


def load_policy(path: str | Path) -> GaussianPolicy:
    record = json.loads(Path(path).read_text())
    if record.get("format") != "vase-policy" or record.get("version") != CHECKPOINT_VERSION:
        raise PolicyError(f"{path}: not a version {CHECKPOINT_VERSION} policy checkpoint")
    spec = MlpSpec(tuple(record["spec"]["layer_sizes"]), record["spec"]["hidden_activation"])
    return GaussianPolicy(spec, np.array(record["params"]), np.array(record["log_std"]))
