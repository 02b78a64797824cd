"""Analytic Gaussian/Dirac mixture distributions.

These mixtures play the role of a perfectly trained model: their perturbed
densities, scores, posterior-mean denoisers, and component posteriors all
have closed forms, so every downstream component (parameterizations,
samplers, training objectives) can be checked against exact ground truth.

Conventions: data lives in the unit-scale frame where a noisy observation is
``x = x0 + sigma * n`` with ``n ~ N(0, I)``.  A component with ``std == 0``
is a Dirac (point mass); perturbing it by ``sigma`` gives an isotropic
Gaussian of std ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptySelectionError

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class IsotropicGMM:
    """Mixture of isotropic Gaussians (std > 0) and Diracs (std == 0).

    Attributes:
        dim: dimensionality of the data space.
        weights: (K,) strictly positive, summing to 1.
        means: (K, dim) component centers.
        stds: (K,) nonnegative per-component standard deviations.
    """

    dim: int
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.stds, dtype=np.float64)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        if self.dim < 1:
            raise DomainError("dim must be a positive integer")
        if weights.ndim != 1 or weights.size == 0:
            raise DomainError("at least one component is required")
        if np.any(weights <= 0):
            raise DomainError("component weights must be strictly positive")
        if abs(float(weights.sum()) - 1.0) > _WEIGHT_TOL:
            raise DomainError("component weights must sum to 1")
        if means.shape != (weights.size, self.dim):
            raise DomainError(
                f"means must have shape ({weights.size}, {self.dim}), got {means.shape}"
            )
        if stds.shape != weights.shape or np.any(stds < 0):
            raise DomainError("stds must be nonnegative, one per component")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def has_dirac(self) -> bool:
        return bool(np.any(self.stds == 0))


def make_gmm(components, dim=None) -> IsotropicGMM:
    """Build an IsotropicGMM from (weight, mean, std) triples.

    ``mean`` may be a scalar (1-D) or a sequence; ``dim`` is inferred from
    the first mean when not given.
    """
    weights, means, stds = [], [], []
    for weight, mean, std in components:
        weights.append(float(weight))
        means.append(np.atleast_1d(np.asarray(mean, dtype=np.float64)))
        stds.append(float(std))
    if dim is None:
        dim = means[0].size
    return IsotropicGMM(
        dim=int(dim),
        weights=np.array(weights),
        means=np.stack(means),
        stds=np.array(stds),
    )


def _check_point(gmm: IsotropicGMM, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.dim:
        raise DomainError(f"x has trailing dimension {x.shape[-1]}, expected {gmm.dim}")
    return x


def _check_sigma(gmm: IsotropicGMM, sigma: float, density: bool) -> float:
    sigma = float(sigma)
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    if sigma == 0 and density and gmm.has_dirac:
        raise DomainError("density at sigma=0 is undefined for Dirac components")
    return sigma


def _component_log_densities(gmm: IsotropicGMM, x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-component log N(x; mu_k, (std_k^2 + sigma^2) I), shape (..., K)."""
    var = gmm.stds**2 + sigma**2  # (K,)
    diff = x[..., None, :] - gmm.means  # (..., K, dim)
    sq = np.sum(diff * diff, axis=-1)  # (..., K)
    return -0.5 * (sq / var + gmm.dim * np.log(2.0 * np.pi * var))


def _log_weighted(gmm: IsotropicGMM, x: np.ndarray, sigma: float) -> np.ndarray:
    return np.log(gmm.weights) + _component_log_densities(gmm, x, sigma)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    out = amax[..., 0] + np.log(np.sum(np.exp(a - amax), axis=axis))
    return out


def gmm_log_density(gmm: IsotropicGMM, x, sigma: float):
    """Log density of the sigma-perturbed mixture at x.

    Per-component variance is ``std_k^2 + sigma^2``; the sum over components
    runs in log space so log-densities far below the overflow threshold stay
    exact.
    """
    x = _check_point(gmm, x)
    sigma = _check_sigma(gmm, sigma, density=True)
    return _logsumexp(_log_weighted(gmm, x, sigma))


def gmm_score(gmm: IsotropicGMM, x, sigma: float):
    """Exact score of the perturbed mixture: grad_x log q(x; sigma)."""
    x = _check_point(gmm, x)
    sigma = _check_sigma(gmm, sigma, density=True)
    resp = gmm_component_posterior(gmm, x, sigma)  # (..., K)
    var = gmm.stds**2 + sigma**2
    pull = (gmm.means - x[..., None, :]) / var[:, None]  # (..., K, dim)
    return np.sum(resp[..., None] * pull, axis=-2)


def gmm_denoise(gmm: IsotropicGMM, x, sigma: float):
    """Posterior mean of the clean point given x at noise level sigma.

    Equals ``x + sigma^2 * score`` for sigma > 0 and passes x through at
    sigma = 0 (the limit of that expression).
    """
    x = _check_point(gmm, x)
    sigma = _check_sigma(gmm, sigma, density=False)
    if sigma == 0:
        return x.copy()
    return x + sigma**2 * gmm_score(gmm, x, sigma)


def gmm_component_posterior(gmm: IsotropicGMM, x, sigma: float):
    """Exact p(component | x, sigma) by Bayes over perturbed densities."""
    x = _check_point(gmm, x)
    sigma = _check_sigma(gmm, sigma, density=True)
    logw = _log_weighted(gmm, x, sigma)
    logw -= np.max(logw, axis=-1, keepdims=True)
    resp = np.exp(logw)
    return resp / np.sum(resp, axis=-1, keepdims=True)


def conditional_restrict(gmm: IsotropicGMM, label_set) -> IsotropicGMM:
    """Mixture restricted to a subset of components, weights renormalized."""
    idx = np.atleast_1d(np.asarray(label_set, dtype=np.intp))
    if idx.size == 0:
        raise EmptySelectionError("label_set must select at least one component")
    if np.any(idx < 0) or np.any(idx >= gmm.n_components):
        raise DomainError("label_set index out of range")
    weights = gmm.weights[idx]
    return IsotropicGMM(
        dim=gmm.dim,
        weights=weights / weights.sum(),
        means=gmm.means[idx],
        stds=gmm.stds[idx],
    )


def gmm_sample(gmm: IsotropicGMM, rng: np.random.Generator, n: int,
               return_labels: bool = False):
    """Draw n i.i.d. points; deterministic given the generator state."""
    if n < 1:
        raise DomainError("n must be >= 1")
    labels = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    x = gmm.means[labels] + gmm.stds[labels, None] * noise
    if return_labels:
        return x, labels
    return x


def perturb(x0, sigma: float, rng: np.random.Generator):
    """Forward noising x0 + sigma * n with standard normal n."""
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = float(sigma)
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    if sigma == 0:
        return x0.copy()
    return x0 + sigma * rng.standard_normal(x0.shape)


def sample_perturbed(gmm: IsotropicGMM, sigma: float, rng: np.random.Generator,
                     n: int):
    """Exact draw from the sigma-perturbed mixture q(x; sigma).

    Used for exact-prior initialization: removes the truncation mismatch
    between N(0, sigma_max^2) and the true marginal at sigma_max.
    """
    return perturb(gmm_sample(gmm, rng, n), sigma, rng)
