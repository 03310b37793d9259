"""Gaussian-mixture latent prior: initialization, sampling and log-density.

Covariances are parameterized through a factor ``A_k`` with
``Sigma_k = A_k A_k^T``. ``sigma_init`` and ``sigma_scale`` both live in
covariance space, so a static prior built with ``sigma_init=0.15`` has
``Sigma_k = 0.15 I`` and sampling at ``scale=s`` draws from
``N(mu_k, s * Sigma_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import nn
from .errors import NumericError, ParameterError

MODES = ("static", "dynamic")


@dataclass
class MixturePrior:
    mu: nn.Tensor        # [K, d]
    factor: nn.Tensor    # [K, d] diagonal of A_k, or [K, d, d] for full factors
    alpha: np.ndarray    # [K]
    mode: str = "static"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.shape != (self.K,) or np.any(alpha < 0) or not math.isclose(alpha.sum(), 1.0, abs_tol=1e-12):
            raise ParameterError("alpha must be K non-negative weights summing to 1")
        self.alpha = alpha
        if self.factor.shape[:2] != self.mu.shape or self.factor.data.ndim not in (2, 3):
            raise ParameterError(f"factor shape {self.factor.shape} incompatible with mu {self.mu.shape}")
        trainable = self.mode == "dynamic"
        self.mu.requires_grad = trainable
        self.factor.requires_grad = trainable

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def full_factor(self):
        return self.factor.data.ndim == 3

    def params(self):
        """Trainable parameters (empty for a static prior)."""
        store = nn.ParamStore()
        if self.mode == "dynamic":
            store["mu"] = self.mu
            store["factor"] = self.factor
        return store

    def factors(self):
        """A_k as dense [K, d, d] matrices."""
        if self.full_factor:
            return self.factor.data.copy()
        return np.stack([np.diag(row) for row in self.factor.data])

    def covariances(self, scale=1.0):
        A = self.factors()
        return scale * np.einsum("kij,klj->kil", A, A)

    def means(self):
        return self.mu.data.copy()

    def to_dict(self):
        return {
            "mode": self.mode,
            "alpha": self.alpha.tolist(),
            "mu": nn._pack(self.mu.data),
            "factor": nn._pack(self.factor.data),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(nn.Tensor(nn._unpack(d["mu"])), nn.Tensor(nn._unpack(d["factor"])),
                   np.array(d["alpha"], dtype=np.float64), d["mode"])


def init_static(K, d, c, sigma_init, rng, mode="static", full_factor=False):
    """Means ~ U[-c, c]^d and Sigma_k = sigma_init * I, uniform weights."""
    if K < 1 or d < 1:
        raise ParameterError(f"K and d must be positive (got K={K}, d={d})")
    if sigma_init <= 0:
        raise ParameterError(f"sigma_init must be positive, got {sigma_init}")
    if c < 0:
        raise ParameterError(f"c must be non-negative, got {c}")
    mu = rng.uniform(-c, c, size=(K, d)) if c > 0 else np.zeros((K, d))
    root = math.sqrt(sigma_init)
    factor = np.stack([root * np.eye(d)] * K) if full_factor else np.full((K, d), root)
    return MixturePrior(nn.Tensor(mu), nn.Tensor(factor), np.full(K, 1.0 / K), mode)


def standard_normal_prior(d):
    """N(0, I) written as a one-component mixture (the baseline GAN prior)."""
    return MixturePrior(nn.Tensor(np.zeros((1, d))), nn.Tensor(np.ones((1, d))), np.ones(1), "static")


def sample_component(prior, rng, size=None):
    """Gaussian index k ~ Categorical(alpha); an int, or an array when ``size`` is given."""
    k = rng.choice(prior.K, size=size, p=prior.alpha)
    return int(k) if size is None else k.astype(np.intp)


def reparameterize(prior, ks, eps, scale=1.0):
    """z_b = sqrt(scale) * A_{k_b} eps_b + mu_{k_b} as a graph node.

    In dynamic mode gradients reach ``mu`` and ``factor`` through the result.
    """
    ks = np.asarray(ks, dtype=np.intp)
    if ks.size and (ks.min() < 0 or ks.max() >= prior.K):
        raise ParameterError(f"component index out of range [0, {prior.K})")
    if scale <= 0:
        raise ParameterError(f"sigma_scale must be positive, got {scale}")
    eps = nn.as_tensor(eps)
    root = math.sqrt(scale)
    A = nn.take_rows(prior.factor, ks)
    if prior.full_factor:
        spread = nn.batched_matvec(A, eps)
    else:
        spread = A * eps
    return nn.take_rows(prior.mu, ks) + spread * root


def sample_latents(prior, ks, scale, rng):
    """One latent per entry of ``ks``; returns a [B, d] tensor."""
    eps = rng.standard_normal((len(ks), prior.d))
    return reparameterize(prior, ks, eps, scale)


def sample_latent(prior, k, scale, rng):
    """A single z | k as a [d] tensor."""
    if not 0 <= k < prior.K:
        raise ParameterError(f"component index {k} out of range [0, {prior.K})")
    z = sample_latents(prior, np.array([k]), scale, rng)
    return nn._node(z.data[0], (z,), lambda g: (g[None, :],))


def sample_marginal(prior, n, scale, rng):
    """Draw k then z | k for ``n`` latents; returns (ks, z)."""
    ks = sample_component(prior, rng, size=n)
    return ks, sample_latents(prior, ks, scale, rng)


def _component_logpdfs(means, covariances, X):
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covariances, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = means.shape[1]
    out = np.empty((X.shape[0], means.shape[0]))
    for m, (mu, cov) in enumerate(zip(means, covs)):
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise NumericError(f"covariance of component {m} is not positive definite") from None
        diff = np.linalg.solve(L, (X - mu).T)
        maha = np.sum(diff * diff, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, m] = -0.5 * (d * math.log(2.0 * math.pi) + logdet + maha)
    return out


def mixture_log_density_batch(means, covariances, weights, X):
    """log sum_m w_m N(x; mu_m, Sigma_m) for every row of X."""
    weights = np.asarray(weights, dtype=np.float64)
    comp = _component_logpdfs(means, covariances, X)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logsumexp(comp + logw, axis=1)


def mixture_log_density(means, covariances, weights, x):
    return float(mixture_log_density_batch(means, covariances, weights, np.atleast_2d(x))[0])
