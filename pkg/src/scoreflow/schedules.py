"""Training-time noise-level samplers, inference-time step grids, loss weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidRangeError, InvalidRhoError

TRAIN_NOISE_KINDS = (
    "log_normal", "log_uniform", "cosine_uniform", "sigmoid_uniform", "logit_normal",
)
GRID_KINDS = (
    "polynomial", "linear", "quadratic", "log_linear", "cosine_logsnr", "linear_logsnr",
)
WEIGHTING_KINDS = ("edm", "uniform", "inv_sigma2", "inv_cout")


@dataclass(frozen=True)
class TrainNoiseSampler:
    """Distribution of noise levels drawn during training.

    log_normal / logit_normal use (p_mean, p_std); the bounded kinds use
    (sigma_min, sigma_max); sigmoid_uniform additionally takes a slope and
    offset for its logSNR warp.
    """

    kind: str = "log_normal"
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 2e-3
    sigma_max: float = 80.0
    slope: float = 2.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in TRAIN_NOISE_KINDS:
            raise DomainError(f"unknown train-noise kind {self.kind!r}")
        if self.p_std <= 0:
            raise DomainError("p_std must be positive")
        if self.kind in ("log_uniform", "cosine_uniform", "sigmoid_uniform"):
            if not 0 < self.sigma_min < self.sigma_max:
                raise InvalidRangeError("need 0 < sigma_min < sigma_max")
        if self.slope <= 0:
            raise DomainError("slope must be positive")

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Draw noise levels; scalar when n is None, else shape (n,)."""
        size = 1 if n is None else int(n)
        if self.kind == "log_normal":
            sigma = np.exp(rng.normal(self.p_mean, self.p_std, size))
        elif self.kind == "log_uniform":
            sigma = np.exp(rng.uniform(math.log(self.sigma_min),
                                       math.log(self.sigma_max), size))
        elif self.kind == "cosine_uniform":
            t = rng.uniform(0.0, 1.0, size)
            sigma = np.clip(np.tan(0.5 * math.pi * t), self.sigma_min, self.sigma_max)
        elif self.kind == "sigmoid_uniform":
            # logSNR drawn from a logistic distribution: inverse-sigmoid warp
            # of uniform t, then sigma = exp(-logSNR / 2).
            t = rng.uniform(0.0, 1.0, size)
            t = np.clip(t, 1e-12, 1.0 - 1e-12)
            logsnr = self.offset + self.slope * np.log(t / (1.0 - t))
            sigma = np.clip(np.exp(-0.5 * logsnr), self.sigma_min, self.sigma_max)
        else:  # logit_normal
            t = 1.0 / (1.0 + np.exp(-rng.normal(self.p_mean, self.p_std, size)))
            sigma = t / (1.0 - t)
        return float(sigma[0]) if n is None else sigma

    def cdf(self, sigma):
        """Analytic CDF where available (for distribution tests)."""
        from scipy.stats import norm

        sigma = np.asarray(sigma, dtype=np.float64)
        if self.kind in ("log_normal", "logit_normal"):
            # logit_normal: sigma = t/(1-t) with t = sigmoid(z) collapses to
            # sigma = exp(z), so both share the log-normal CDF.
            return norm.cdf((np.log(sigma) - self.p_mean) / self.p_std)
        if self.kind == "log_uniform":
            lo, hi = math.log(self.sigma_min), math.log(self.sigma_max)
            return np.clip((np.log(sigma) - lo) / (hi - lo), 0.0, 1.0)
        raise DomainError(f"no closed-form CDF for kind {self.kind!r}")


def sample_train_sigma(spec: TrainNoiseSampler, rng: np.random.Generator) -> float:
    """One noise-level draw from the training distribution."""
    return spec.sample(rng)


@dataclass(frozen=True)
class StepGrid:
    """Monotone decreasing sigma sequence with an explicit terminal 0."""

    sigmas: np.ndarray
    kind: str
    rho: float = 7.0

    def __post_init__(self):
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", sigmas)
        if sigmas.ndim != 1 or sigmas.size < 2:
            raise DomainError("grid needs at least one positive level plus terminal 0")
        if sigmas[-1] != 0.0:
            raise DomainError("grid must end at exactly 0")
        if np.any(np.diff(sigmas) >= 0):
            raise DomainError("grid must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        """Number of positive nodes (one denoiser evaluation site each)."""
        return self.sigmas.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    @property
    def sigma_min(self) -> float:
        return float(self.sigmas[-2])


def build_grid(kind: str, n: int, sigma_min: float, sigma_max: float,
               rho: float = 7.0) -> StepGrid:
    """Build an inference step grid of N positive levels plus terminal 0.

    Endpoints are exact: sigmas[0] == sigma_max and sigmas[N-1] == sigma_min
    (for N >= 2; N == 1 yields just [sigma_max, 0]).
    """
    if kind not in GRID_KINDS:
        raise DomainError(f"unknown grid kind {kind!r}")
    if n < 1:
        raise DomainError("n must be >= 1")
    if not (0 < sigma_min < sigma_max):
        raise InvalidRangeError(f"need 0 < sigma_min < sigma_max, got "
                                f"[{sigma_min}, {sigma_max}]")
    if kind == "polynomial" and rho <= 0:
        raise InvalidRhoError(f"rho must be positive, got {rho}")

    if n == 1:
        sigmas = np.array([sigma_max])
    else:
        ramp = np.linspace(0.0, 1.0, n)
        if kind == "polynomial":
            inv = sigma_max ** (1.0 / rho) + ramp * (
                sigma_min ** (1.0 / rho) - sigma_max ** (1.0 / rho)
            )
            sigmas = inv**rho
        elif kind == "linear":
            sigmas = sigma_max + ramp * (sigma_min - sigma_max)
        elif kind == "quadratic":
            root = math.sqrt(sigma_max) + ramp * (
                math.sqrt(sigma_min) - math.sqrt(sigma_max)
            )
            sigmas = root**2
        elif kind in ("log_linear", "linear_logsnr"):
            # linear_logsnr is uniform in -log sigma, which coincides with
            # geometric sigma spacing in the unit-scale frame.
            sigmas = np.exp(
                np.log(sigma_max) + ramp * (math.log(sigma_min) - math.log(sigma_max))
            )
        else:  # cosine_logsnr
            t_hi = 2.0 / math.pi * math.atan(sigma_max)
            t_lo = 2.0 / math.pi * math.atan(sigma_min)
            sigmas = np.tan(0.5 * math.pi * (t_hi + ramp * (t_lo - t_hi)))
        sigmas[0] = sigma_max
        sigmas[-1] = sigma_min
    return StepGrid(sigmas=np.append(sigmas, 0.0), kind=kind, rho=rho)


@dataclass(frozen=True)
class LossWeighting:
    """Per-noise-level loss weight lambda(sigma).

    edm       : (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2, i.e.
                1 / c_out^2 -- makes the raw-output residual a unit-weight
                MSE under preconditioning.
    inv_cout  : the literal 1 / c_out, kept for comparison.
    uniform   : 1.
    inv_sigma2: 1 / sigma^2.
    """

    kind: str = "edm"
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise DomainError(f"unknown weighting kind {self.kind!r}")
        if self.sigma_data <= 0:
            raise DomainError("sigma_data must be positive")

    def weight(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise DomainError("loss weight requires sigma > 0")
        if self.kind == "edm":
            return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2
        if self.kind == "inv_cout":
            return np.sqrt(sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data)
        if self.kind == "uniform":
            return np.ones_like(sigma)
        return 1.0 / sigma**2


def loss_weight(w: LossWeighting, sigma) -> float:
    """Scalar convenience wrapper around LossWeighting.weight."""
    return float(w.weight(sigma))
