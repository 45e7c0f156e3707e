"""Intrinsic surprise signals.

Three interchangeable modes score a transition (s, a, s'):

* ``nll``   surprisal, -log of the posterior-predictive density of s'
* ``bayes`` KL between the weight posterior before and after one update on s'
* ``vase``  expected per-sample surprisal minus ``delta`` times posterior entropy

The discrete-hypothesis routine computes the exact quantities for a finite
belief over deterministic models, which is how the decomposition
expected-surprisal = Bayesian surprise + surprisal is checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import bnn
from .bnn import LikelihoodSpec, PriorSpec, VariationalPosterior
from .numkit import AdamState, NumkitError, Rng

MODES = ("none", "nll", "bayes", "vase")


class SurpriseError(NumkitError):
    pass


@dataclass(frozen=True)
class SurpriseConfig:
    mode: str = "vase"
    delta: float = 1e-3
    eta: float = 1e-3
    n_samples: int = 10
    lik: LikelihoodSpec = field(default_factory=LikelihoodSpec)
    # divide each batch's surprise by its median (off: rewards use eta * u as is)
    median_normalize: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise SurpriseError(f"unknown surprise mode {self.mode!r}; choose from {MODES}")
        if not 0.0 < self.eta <= 1.0:
            raise SurpriseError(f"eta must lie in (0, 1], got {self.eta}")
        if self.delta < 0:
            raise SurpriseError(f"delta must be >= 0, got {self.delta}")
        if self.n_samples < 1:
            raise SurpriseError(f"n_samples must be >= 1, got {self.n_samples}")


def _stack(s, a, s_next):
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    if not len(s) == len(a) == len(s_next):
        raise SurpriseError("states, actions and next states must have equal length")
    return s, a, s_next


def sampled_log_likelihoods(
    post: VariationalPosterior, s, a, s_next, lik: LikelihoodSpec, rng: Rng, n_samples: int
) -> np.ndarray:
    """log P(s' | s, a, theta_n) for fresh draws theta_n per transition, shape (T, N)."""
    s, a, s_next = _stack(s, a, s_next)
    T = len(s)
    thetas = bnn.sample_parameters(post, rng, T * n_samples)
    inputs = np.repeat(np.hstack([s, a]), n_samples, axis=0)
    preds = bnn.predict_each(post, thetas, inputs)
    ll = bnn.state_log_likelihood(preds, np.repeat(s_next, n_samples, axis=0), lik)
    return np.asarray(ll).reshape(T, n_samples)


def vase_from_loglik(loglik: np.ndarray, entropy: float, delta: float) -> np.ndarray:
    return -loglik.mean(axis=-1) - delta * entropy


def nll_from_loglik(loglik: np.ndarray) -> np.ndarray:
    n = loglik.shape[-1]
    return -(logsumexp(loglik, axis=-1) - np.log(n))


def vase_surprise(post, s, a, s_next, cfg: SurpriseConfig, rng: Rng) -> float:
    ll = sampled_log_likelihoods(post, s, a, s_next, cfg.lik, rng, cfg.n_samples)
    return float(vase_from_loglik(ll, bnn.posterior_entropy(post), cfg.delta)[0])


def nll_surprise(post, s, a, s_next, cfg: SurpriseConfig, rng: Rng) -> float:
    ll = sampled_log_likelihoods(post, s, a, s_next, cfg.lik, rng, cfg.n_samples)
    return float(nll_from_loglik(ll)[0])


def bayes_surprise(pre_update: VariationalPosterior, post_update: VariationalPosterior) -> float:
    return bnn.kl_between_posteriors(pre_update, post_update)


def bayes_surprise_transition(
    post: VariationalPosterior,
    s,
    a,
    s_next,
    prior: PriorSpec,
    lik: LikelihoodSpec,
    rng: Rng,
    lr: float,
    moments: AdamState,
    pool_size: int | None = None,
) -> float:
    """Update a scratch copy on one transition and score the divergence.

    ``post`` and ``moments`` are left untouched.
    """
    batch = bnn.MiniBatch.from_transitions(s, a, s_next)
    updated = bnn.elbo_update(post.copy(), batch, prior, lik, rng, lr, moments.copy(), pool_size)
    return bayes_surprise(post, updated)


def batch_surprise(
    post: VariationalPosterior,
    s,
    a,
    s_next,
    cfg: SurpriseConfig,
    rng: Rng,
    prior: PriorSpec | None = None,
    lr: float = 1e-3,
    moments: AdamState | None = None,
    pool_size: int | None = None,
) -> np.ndarray:
    """Surprise of every transition in a batch against one posterior snapshot."""
    s, a, s_next = _stack(s, a, s_next)
    if cfg.mode == "none":
        return np.zeros(len(s))
    if cfg.mode == "bayes":
        prior = prior or PriorSpec()
        moments = moments if moments is not None else bnn.new_moments(post)
        return np.array(
            [
                bayes_surprise_transition(post, s[t], a[t], s_next[t], prior, cfg.lik, rng, lr, moments, pool_size)
                for t in range(len(s))
            ]
        )
    ll = sampled_log_likelihoods(post, s, a, s_next, cfg.lik, rng, cfg.n_samples)
    if cfg.mode == "nll":
        return nll_from_loglik(ll)
    return vase_from_loglik(ll, bnn.posterior_entropy(post), cfg.delta)


def intrinsic_reward(u, cfg: SurpriseConfig):
    if cfg.mode == "none":
        return np.zeros_like(u) if np.ndim(u) else 0.0
    return cfg.eta * u


def median_normalized(u: np.ndarray) -> np.ndarray:
    med = float(np.median(np.abs(u)))
    return u / med if med > 1e-12 else u


# -- exact enumeration over a finite belief -----------------------------------


@dataclass
class DiscreteBelief:
    hypotheses: Sequence[Callable[[np.ndarray, np.ndarray], np.ndarray]]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.hypotheses) != len(self.probs):
            raise SurpriseError("one probability per hypothesis required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise SurpriseError("belief probabilities must be nonnegative and sum to 1")

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-np.sum(p * np.log(p)))


def discrete_assorted_surprise(
    belief: DiscreteBelief, s, a, s_next, lik: LikelihoodSpec
) -> tuple[float, float, float]:
    """(assorted, bayes, nll) by direct enumeration of the hypotheses."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    preds = np.array([np.asarray(h(s, a), dtype=np.float64) for h in belief.hypotheses])
    ll = np.asarray(bnn.state_log_likelihood(preds, np.asarray(s_next, dtype=np.float64), lik))
    support = belief.probs > 0
    p = belief.probs[support]
    ll = ll[support]
    log_evidence = logsumexp(ll, b=p)
    if not np.isfinite(log_evidence):
        raise SurpriseError("observation has zero probability under every hypothesis")
    log_post = np.log(p) + ll - log_evidence
    assorted = float(-np.sum(p * ll))
    bayes = float(np.sum(p * (np.log(p) - log_post)))
    nll = float(-log_evidence)
    return assorted, bayes, nll
