"""Compare analytic mu/rho gradients of the variational objective with central differences.

A single Bayesian layer feeds a softmax classifier; the objective is
kl_weight * KL(q || p) + cross-entropy with the noise held fixed.
"""

import numpy as np

from bxv.numkernel import RngStream
from bxv.varbayes import GaussianPosterior, GaussianPrior, grad_mu, grad_rho, kl_closed_form, softplus_sigma

rng = np.random.default_rng(0)
x = rng.standard_normal((32, 6))
y = rng.integers(0, 3, 32)
post = GaussianPosterior.from_sigma(rng.standard_normal((6, 3)) * 0.3, 0.2)
prior = GaussianPrior(np.zeros((6, 3)), 0.5)
eps = [RngStream(1).normal((6, 3)) for _ in range(3)]
kl_weight = 0.1


def nll(w):
    z = x @ w
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    p[np.arange(len(y)), y] -= 1
    return -logp[np.arange(len(y)), y].sum(), x.T @ p


def objective(mu, rho):
    sig = softplus_sigma(rho)
    data = np.mean([nll(mu + sig * e)[0] for e in eps])
    return kl_weight * kl_closed_form(GaussianPosterior(mu, rho), prior) + data


def fd(f, v, h=1e-6):
    g = np.zeros_like(v)
    for i in np.ndindex(v.shape):
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


grads = [nll(post.mu + post.sigma * e)[1] for e in eps]
g_mu = grad_mu(post, prior, grads, kl_weight)
g_rho = grad_rho(post, prior, grads, eps, kl_weight)
n_mu = fd(lambda m: objective(m, post.rho), post.mu)
n_rho = fd(lambda r: objective(post.mu, r), post.rho)
for name, a, n in (("mu", g_mu, n_mu), ("rho", g_rho, n_rho)):
    err = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n))
    print(f"{name:4s} relative error {err:.2e}")
