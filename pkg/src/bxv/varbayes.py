"""Variational Bayesian layer with a diagonal Gaussian weight posterior.

The posterior over a weight tensor is ``N(mu, softplus(rho)**2)`` per entry
and the prior is a fixed diagonal Gaussian ``N(mu_p, sigma_p**2)``. Training
minimises

    kl_weight * KL(q || prior) + (1/J) * sum_j data_loss(w_j),
    w_j = mu + softplus(rho) * eps_j,  eps_j ~ N(0, I)

with the gradients of :func:`grad_mu` and :func:`grad_rho`. Weight tensors
use the augmented layout ``(in_dim + 1, out_dim)``: the last row is the bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from bxv.errors import NumericalError, ShapeError


def softplus_sigma(rho):
    """``log(1 + exp(rho))`` in the overflow-free form ``max(rho,0) + log1p(exp(-|rho|))``."""
    rho = np.asarray(rho, dtype=np.float64)
    return np.maximum(rho, 0.0) + np.log1p(np.exp(-np.abs(rho)))


def softplus_grad(rho):
    """Derivative of softplus, ``exp(rho) / (1 + exp(rho))``."""
    return expit(np.asarray(rho, dtype=np.float64))


def inverse_softplus(sigma):
    """``rho`` such that ``softplus(rho) == sigma``, i.e. ``log(exp(sigma) - 1)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return sigma + np.log(-np.expm1(-sigma))


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.rho = np.array(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ShapeError(f"mu {self.mu.shape} and rho {self.rho.shape} differ in shape")

    @classmethod
    def from_sigma(cls, mu, sigma0):
        mu = np.array(mu, dtype=np.float64)
        return cls(mu, np.full(mu.shape, float(inverse_softplus(sigma0))))

    @property
    def sigma(self):
        return softplus_sigma(self.rho)

    @property
    def shape(self):
        return self.mu.shape

    def copy(self):
        return GaussianPosterior(self.mu.copy(), self.rho.copy())


@dataclass(frozen=True)
class GaussianPrior:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), mu.shape).copy()
        if np.any(sigma <= 0):
            raise ValueError("prior sigma must be strictly positive")
        mu.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self):
        return self.mu.shape


@dataclass(frozen=True)
class WeightSample:
    w: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    kl_term: float
    nll_term: float
    total: float
    j_samples: int = 1
    kl_weight: float = 1.0


def _check_pair(post, prior):
    if post.shape != prior.shape:
        raise ShapeError(f"posterior shape {post.shape} does not match prior shape {prior.shape}")


def sample_weights(post: GaussianPosterior, rng, eps=None) -> WeightSample:
    """Reparameterised draw ``w = mu + sigma * eps``; ``eps`` can be supplied directly."""
    if eps is None:
        eps = rng.normal(post.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != post.shape:
            raise ShapeError(f"noise shape {eps.shape} does not match posterior {post.shape}")
    return WeightSample(post.mu + post.sigma * eps, eps)


def kl_closed_form(post: GaussianPosterior, prior: GaussianPrior) -> float:
    _check_pair(post, prior)
    sq = post.sigma
    sp = prior.sigma
    terms = np.log(sp / sq) + ((post.mu - prior.mu) ** 2 + sq**2) / (2.0 * sp**2) - 0.5
    return float(np.sum(terms))


def mc_nll(post: GaussianPosterior, data_loss, rng, j_samples: int = 1):
    """Monte Carlo estimate of the expected data loss under the posterior.

    Returns ``(estimate, samples)``; the samples are kept so the caller can
    reuse them for the gradient.
    """
    if j_samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    samples = []
    total = 0.0
    for _ in range(j_samples):
        s = sample_weights(post, rng)
        value = float(data_loss(s.w))
        if not np.isfinite(value):
            raise NumericalError("data loss returned a non-finite value")
        total += value
        samples.append(s)
    return total / j_samples, samples


def variational_loss(kl: float, nll: float, kl_weight: float = 1.0, j_samples: int = 1) -> LossBreakdown:
    if not (np.isfinite(kl) and np.isfinite(nll) and np.isfinite(kl_weight)):
        raise NumericalError(f"non-finite loss terms: kl={kl}, nll={nll}, kl_weight={kl_weight}")
    if kl < -1e-12:
        raise ValueError(f"KL term must be non-negative, got {kl}")
    if kl_weight < 0:
        raise ValueError("kl_weight must be non-negative")
    return LossBreakdown(float(kl), float(nll), kl_weight * kl + nll, j_samples, kl_weight)


def _mean_grad(grads, shape):
    grads = list(grads)
    if not grads:
        raise ValueError("need at least one per-sample gradient")
    acc = np.zeros(shape)
    for g in grads:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ShapeError(f"gradient shape {g.shape} does not match posterior {shape}")
        acc = acc + g
    return acc / len(grads)


def grad_mu(post: GaussianPosterior, prior: GaussianPrior, grads, kl_weight: float = 1.0):
    """dL/dmu: ``kl_weight * (mu - mu_p) / sigma_p**2 + mean_j G_j``."""
    _check_pair(post, prior)
    data = _mean_grad(grads, post.shape)
    return kl_weight * ((post.mu - prior.mu) / prior.sigma**2) + data


def grad_rho(post: GaussianPosterior, prior: GaussianPrior, grads, eps_used, kl_weight: float = 1.0):
    """dL/drho: ``(kl_weight * (sigma/sigma_p**2 - 1/sigma) + mean_j eps_j * G_j) * softplus'(rho)``."""
    _check_pair(post, prior)
    grads = list(grads)
    eps_used = list(eps_used)
    if len(grads) != len(eps_used):
        raise ShapeError(f"{len(grads)} gradients but {len(eps_used)} noise draws")
    for e in eps_used:
        if np.shape(e) != post.shape:
            raise ShapeError(f"noise shape {np.shape(e)} does not match posterior {post.shape}")
    s = softplus_grad(post.rho)
    sq = post.sigma
    kl_part = (sq / prior.sigma**2 - 1.0 / sq) * s
    data = _mean_grad([e * g for e, g in zip(eps_used, grads)], post.shape) * s
    return kl_weight * kl_part + data


def affine(x, weights):
    """``x @ W + b`` for an augmented ``(in_dim + 1, out_dim)`` weight matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] + 1 != weights.shape[0]:
        raise ShapeError(f"input {x.shape} is incompatible with weights {weights.shape}")
    return x @ weights[:-1] + weights[-1]


def variational_forward(post: GaussianPosterior, x, rng=None, mode="sample", eps=None):
    """Affine map with sampled (``mode="sample"``) or mean (``mode="mean"``) weights.

    Returns ``(output, sample)``; ``sample`` is None in mean mode.
    """
    if mode == "mean":
        return affine(x, post.mu), None
    if mode != "sample":
        raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
    sample = sample_weights(post, rng, eps)
    return affine(x, sample.w), sample
