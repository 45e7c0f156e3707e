"""Bayesian dynamics model with a fully factorised Gaussian weight posterior.

Each network weight theta_i has its own N(mu_i, sigma_i^2) with
sigma_i = softplus(rho_i). The model is fitted by stochastic ascent on the
evidence lower bound using reparameterised samples theta = mu + sigma * eps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import (
    AdamState,
    DimensionError,
    MlpSpec,
    NumkitError,
    Rng,
    adam_step,
    check_finite,
    inverse_softplus,
    mlp_forward,
    mlp_forward_each,
    mlp_gradient,
    sigmoid,
    softplus,
)

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class BnnError(NumkitError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    sigma_m: float = 0.5

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise BnnError(f"prior sigma must be positive, got {self.sigma_m}")


@dataclass(frozen=True)
class LikelihoodSpec:
    sigma_c: float = 5.0
    # False: one normaliser over the squared norm (as printed); True: per-dimension product.
    per_dimension: bool = False

    def __post_init__(self):
        if not self.sigma_c > 0:
            raise BnnError(f"likelihood sigma must be positive, got {self.sigma_c}")


@dataclass
class VariationalPosterior:
    spec: MlpSpec
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        self.rho = np.asarray(self.rho, dtype=np.float64).copy()
        n = self.spec.n_params
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise DimensionError("posterior (mu, rho) length", n, (self.mu.shape, self.rho.shape))

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(self.spec, self.mu, self.rho)

    @classmethod
    def initial(
        cls,
        spec: MlpSpec,
        prior: PriorSpec,
        rng: Rng,
        mu_std: float = 0.05,
        sigma_fraction: float = 0.1,
    ) -> "VariationalPosterior":
        mu = mu_std * rng.normal(spec.n_params)
        rho = np.full(spec.n_params, float(inverse_softplus(sigma_fraction * prior.sigma_m)))
        return cls(spec, mu, rho)


@dataclass
class MiniBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if len(self.inputs) == 0:
            raise BnnError("empty minibatch")
        if len(self.inputs) != len(self.targets):
            raise DimensionError("minibatch targets", len(self.inputs), len(self.targets))

    def __len__(self) -> int:
        return len(self.inputs)

    @classmethod
    def from_transitions(cls, states, actions, next_states) -> "MiniBatch":
        return cls(np.hstack([np.atleast_2d(states), np.atleast_2d(actions)]), next_states)


def model_spec(state_dim: int, action_dim: int, hidden=(32,), activation: str = "relu") -> MlpSpec:
    return MlpSpec((state_dim + action_dim, *hidden, state_dim), activation)


def sample_parameters(post: VariationalPosterior, rng: Rng, n: int) -> np.ndarray:
    """``n`` reparameterised weight draws, shape (n, |theta|)."""
    if n < 1:
        raise BnnError(f"need at least one sample, got {n}")
    eps = rng.normal((n, post.n_params))
    return post.mu + post.sigma * eps


def predict_next_state(post: VariationalPosterior, theta: np.ndarray, s, a) -> np.ndarray:
    x = np.concatenate([np.atleast_1d(s), np.atleast_1d(a)]).astype(np.float64)
    if x.shape[0] != post.spec.n_in:
        raise DimensionError("state+action width", post.spec.n_in, x.shape[0])
    return mlp_forward(post.spec, theta, x)


def predict_each(post: VariationalPosterior, thetas: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Prediction for row k of ``inputs`` under parameter row k of ``thetas``."""
    return mlp_forward_each(post.spec, thetas, inputs)


def state_log_likelihood(pred, actual, lik: LikelihoodSpec) -> np.ndarray | float:
    """Gaussian log density of ``actual`` around ``pred`` (last axis is the state)."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape[-1:] != actual.shape[-1:]:
        raise DimensionError("state dimension", pred.shape[-1:], actual.shape[-1:])
    var = lik.sigma_c**2
    sq = np.sum((pred - actual) ** 2, axis=-1)
    n_norm = pred.shape[-1] if lik.per_dimension else 1
    out = -sq / (2.0 * var) - 0.5 * n_norm * (LOG_2PI + math.log(var))
    return float(out) if np.ndim(out) == 0 else out


def posterior_entropy(post: VariationalPosterior) -> float:
    return float(0.5 * np.sum(LOG_2PI + 1.0 + 2.0 * np.log(post.sigma)))


def kl_to_prior(post: VariationalPosterior, prior: PriorSpec) -> float:
    sig = post.sigma
    sm = prior.sigma_m
    return float(np.sum(np.log(sm / sig) + (sig**2 + post.mu**2) / (2.0 * sm**2) - 0.5))


def kl_diag_gaussian(mu_p, sig_p, mu_q, sig_q) -> float:
    """KL(N(mu_p, sig_p^2) || N(mu_q, sig_q^2)) summed over coordinates."""
    return float(
        np.sum(np.log(sig_q / sig_p) + (sig_p**2 + (mu_p - mu_q) ** 2) / (2.0 * sig_q**2) - 0.5)
    )


def kl_between_posteriors(p: VariationalPosterior, q: VariationalPosterior) -> float:
    if p.spec != q.spec:
        raise BnnError(f"posterior specs differ: {p.spec} vs {q.spec}")
    return max(kl_diag_gaussian(p.mu, p.sigma, q.mu, q.sigma), 0.0)


def elbo_and_grad(
    post: VariationalPosterior,
    batch: MiniBatch,
    prior: PriorSpec,
    lik: LikelihoodSpec,
    eps: np.ndarray,
    kl_weight: float = 1.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """ELBO estimate with fixed noise ``eps`` (shape (n_samples, |theta|)).

    Returns (elbo, d elbo / d mu, d elbo / d rho).
    """
    eps = np.atleast_2d(eps)
    if eps.shape[1] != post.n_params:
        raise DimensionError("noise width", post.n_params, eps.shape[1])
    sig = post.sigma
    var = lik.sigma_c**2
    n = len(eps)
    ll = 0.0
    g_mu = np.zeros(post.n_params)
    g_rho = np.zeros(post.n_params)
    for e in eps:
        theta = post.mu + sig * e
        pred = mlp_forward(post.spec, theta, batch.inputs)
        ll += float(np.sum(state_log_likelihood(pred, batch.targets, lik)))
        g_theta = mlp_gradient(post.spec, theta, batch.inputs, -(pred - batch.targets) / var)
        g_mu += g_theta
        # pathwise: d theta / d rho = eps * softplus'(rho)
        g_rho += g_theta * e
    ll /= n
    g_mu /= n
    g_rho = g_rho / n * sigmoid(post.rho)

    sm2 = prior.sigma_m**2
    kl = kl_to_prior(post, prior)
    g_mu -= kl_weight * post.mu / sm2
    g_rho -= kl_weight * (-1.0 / sig + sig / sm2) * sigmoid(post.rho)
    value = ll - kl_weight * kl
    return value, check_finite(g_mu, "elbo grad mu"), check_finite(g_rho, "elbo grad rho")


def elbo(
    post: VariationalPosterior,
    batch: MiniBatch,
    prior: PriorSpec,
    lik: LikelihoodSpec,
    rng: Rng,
    n_samples: int = 1,
    pool_size: int | None = None,
) -> float:
    """Monte-Carlo ELBO on a minibatch.

    The KL term is scaled by ``len(batch) / pool_size`` so that summing over
    one pass of the pool gives the full-data bound; with ``pool_size=None``
    the batch is treated as the whole dataset.
    """
    if n_samples < 1:
        raise BnnError(f"need at least one sample, got {n_samples}")
    eps = rng.normal((n_samples, post.n_params))
    w = kl_weight_for(len(batch), pool_size)
    return _elbo_value(post, batch, prior, lik, eps, w)


def _elbo_value(post, batch, prior, lik, eps, kl_weight) -> float:
    thetas = post.mu + post.sigma * np.atleast_2d(eps)
    ll = 0.0
    for theta in thetas:
        pred = mlp_forward(post.spec, theta, batch.inputs)
        ll += float(np.sum(state_log_likelihood(pred, batch.targets, lik)))
    return ll / len(thetas) - kl_weight * kl_to_prior(post, prior)


def kl_weight_for(batch_size: int, pool_size: int | None) -> float:
    if pool_size is None:
        return 1.0
    return batch_size / max(pool_size, batch_size)


def elbo_update(
    post: VariationalPosterior,
    batch: MiniBatch,
    prior: PriorSpec,
    lik: LikelihoodSpec,
    rng: Rng,
    lr: float,
    moments: AdamState,
    pool_size: int | None = None,
    n_samples: int = 1,
) -> VariationalPosterior:
    """One Adam ascent step on the ELBO. ``moments`` is advanced in place."""
    eps = rng.normal((n_samples, post.n_params))
    _, g_mu, g_rho = elbo_and_grad(post, batch, prior, lik, eps, kl_weight_for(len(batch), pool_size))
    n = post.n_params
    flat = np.concatenate([post.mu, post.rho])
    new = adam_step(flat, -np.concatenate([g_mu, g_rho]), moments, lr)
    return VariationalPosterior(post.spec, new[:n], new[n:])


def new_moments(post: VariationalPosterior) -> AdamState:
    return AdamState.zeros(2 * post.n_params)


# -- checkpoints --------------------------------------------------------------


def save_posterior(
    path: str | Path, post: VariationalPosterior, prior: PriorSpec, lik: LikelihoodSpec
) -> None:
    record = {
        "format": "vase-posterior",
        "version": CHECKPOINT_VERSION,
        "spec": {"layer_sizes": list(post.spec.layer_sizes), "hidden_activation": post.spec.hidden_activation},
        "prior": {"sigma_m": prior.sigma_m},
        "likelihood": {"sigma_c": lik.sigma_c, "per_dimension": lik.per_dimension},
        "mu": post.mu.tolist(),
        "rho": post.rho.tolist(),
    }
    Path(path).write_text(json.dumps(record))


def load_posterior(path: str | Path) -> tuple[VariationalPosterior, PriorSpec, LikelihoodSpec]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != "vase-posterior" or record.get("version") != CHECKPOINT_VERSION:
        raise BnnError(f"{path}: not a version {CHECKPOINT_VERSION} posterior checkpoint")
    spec = MlpSpec(tuple(record["spec"]["layer_sizes"]), record["spec"]["hidden_activation"])
    post = VariationalPosterior(spec, np.array(record["mu"]), np.array(record["rho"]))
    return post, PriorSpec(**record["prior"]), LikelihoodSpec(**record["likelihood"])
