"""Parameterization algebra and coordinate frames.

A noising geometry is a pair of functions (s(t), sigma(t)) giving the
perturbation kernel N(s * x0, s^2 sigma^2 I).  All samplers in this package
run in the unit-scale frame (s = 1, sigma(t) = t); other frames reach them
through the rescaling maps below.  Model outputs come in five flavors
(denoiser / epsilon / score / velocity / flow) and every one converts to and
from the canonical denoiser prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, MissingFrameError

KINDS = ("denoiser", "epsilon", "score", "velocity", "flow")
FRAME_KINDS = ("VE", "VP", "EDM", "RF")


@dataclass(frozen=True)
class CoordinateFrame:
    """A named (s(t), sigma(t)) noising geometry.

    EDM: s=1, sigma=t            (t >= 0)
    VE : s=1, sigma=sqrt(t)      (t >= 0)
    VP : s=cos(pi t/2), sigma=tan(pi t/2), trigonometric form (t in [0,1))
    RF : s=1-t, sigma=t/(1-t), the linear-interpolation path (t in [0,1))
    """

    kind: str

    def __post_init__(self):
        if self.kind not in FRAME_KINDS:
            raise DomainError(f"unknown frame kind {self.kind!r}")

    def _check_t(self, t: float) -> float:
        t = float(t)
        if self.kind in ("VP", "RF"):
            if not 0.0 <= t < 1.0:
                raise DomainError(f"{self.kind} frame requires t in [0, 1), got {t}")
        elif t < 0.0:
            raise DomainError(f"{self.kind} frame requires t >= 0, got {t}")
        return t

    def scale(self, t: float) -> float:
        t = self._check_t(t)
        if self.kind in ("EDM", "VE"):
            return 1.0
        if self.kind == "VP":
            return math.cos(0.5 * math.pi * t)
        return 1.0 - t

    def sigma(self, t: float) -> float:
        t = self._check_t(t)
        if self.kind == "EDM":
            return t
        if self.kind == "VE":
            return math.sqrt(t)
        if self.kind == "VP":
            return math.tan(0.5 * math.pi * t)
        return t / (1.0 - t)

    def time_from_sigma(self, sigma: float) -> float:
        """Inverse of sigma(t); sigma is monotone on the valid range."""
        sigma = float(sigma)
        if sigma < 0:
            raise DomainError("sigma must be nonnegative")
        if self.kind == "EDM":
            return sigma
        if self.kind == "VE":
            return sigma**2
        if self.kind == "VP":
            return 2.0 / math.pi * math.atan(sigma)
        return sigma / (1.0 + sigma)


def frame_scale(frame: CoordinateFrame, t: float) -> tuple[float, float]:
    """Return (s(t), sigma(t)) for the frame at time t."""
    return frame.scale(t), frame.sigma(t)


def rescale_to_edm(x_frame, t: float, frame: CoordinateFrame):
    """Map a frame-native noisy point to unit-scale coordinates.

    If x_frame ~ N(s * x0, s^2 sigma^2 I) then the returned x_hat ~
    N(x0, sigma_hat^2 I) with sigma_hat = sigma(t).
    """
    s, sigma = frame_scale(frame, t)
    if s <= 0:
        raise DomainError(f"scale s(t)={s} is not positive at t={t}")
    return np.asarray(x_frame, dtype=np.float64) / s, sigma


def rescale_from_edm(x_hat, t: float, frame: CoordinateFrame):
    """Inverse of rescale_to_edm: unit-scale point to frame-native."""
    s, sigma = frame_scale(frame, t)
    return np.asarray(x_hat, dtype=np.float64) * s, sigma


def to_denoiser(kind: str, value, x, sigma: float, frame: CoordinateFrame | None = None,
                t: float | None = None):
    """Convert a raw model output at (x, sigma) to the canonical x0 estimate.

    x and sigma are unit-scale coordinates.  Velocity uses the unit-data-
    variance trigonometric convention.  Flow outputs are native to a scaled
    frame, so they additionally need the (frame, t) pair; the conversion
    moves x into that frame, applies x_frame - t * u, and the result is
    already a clean-data estimate (no further rescaling needed).
    """
    value = np.asarray(value, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if value.shape != x.shape:
        raise DomainError(f"output shape {value.shape} != x shape {x.shape}")
    if kind == "flow":
        if frame is None or t is None:
            raise MissingFrameError("flow outputs require the (frame, t) pair")
        x_frame, _ = rescale_from_edm(x, t, frame)
        return x_frame - float(t) * value
    sigma = float(sigma)
    if sigma <= 0:
        raise DomainError("conversion requires sigma > 0")
    if kind == "denoiser":
        return value
    if kind == "score":
        return x + sigma**2 * value
    if kind == "epsilon":
        return x - sigma * value
    if kind == "velocity":
        return x / (1.0 + sigma**2) - sigma * value / math.sqrt(1.0 + sigma**2)
    raise DomainError(f"unknown output kind {kind!r}")


def from_denoiser(kind: str, x0_hat, x, sigma: float,
                  frame: CoordinateFrame | None = None, t: float | None = None):
    """Exact inverse of to_denoiser: express an x0 estimate as a raw output."""
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x0_hat.shape != x.shape:
        raise DomainError(f"x0_hat shape {x0_hat.shape} != x shape {x.shape}")
    if kind == "flow":
        if frame is None or t is None:
            raise MissingFrameError("flow outputs require the (frame, t) pair")
        if t <= 0:
            raise DomainError("flow inversion requires t > 0")
        x_frame, _ = rescale_from_edm(x, t, frame)
        return (x_frame - x0_hat) / float(t)
    sigma = float(sigma)
    if sigma <= 0:
        raise DomainError("conversion requires sigma > 0")
    if kind == "denoiser":
        return x0_hat
    if kind == "score":
        return (x0_hat - x) / sigma**2
    if kind == "epsilon":
        return (x - x0_hat) / sigma
    if kind == "velocity":
        return (x / (1.0 + sigma**2) - x0_hat) * math.sqrt(1.0 + sigma**2) / sigma
    raise DomainError(f"unknown output kind {kind!r}")


@dataclass(frozen=True)
class Preconditioner:
    """Noise-dependent input/output scalings around a raw network.

    The coefficients keep the network's input and regression target at unit
    variance across noise levels and blend the skip connection so prediction
    error is not amplified at either extreme.
    """

    sigma_data: float = 0.5

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise DomainError("sigma_data must be positive")

    def c_skip(self, sigma):
        sd2 = self.sigma_data**2
        return sd2 / (np.asarray(sigma) ** 2 + sd2)

    def c_out(self, sigma):
        sigma = np.asarray(sigma)
        return sigma * self.sigma_data / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.asarray(sigma) ** 2 + self.sigma_data**2)

    def c_noise(self, sigma):
        return np.log(np.asarray(sigma)) / 4.0


def precondition_wrap(raw_fn, pc: Preconditioner):
    """Wrap a raw network map into a denoiser.

    raw_fn(x_scaled, c_noise) -> raw output; the wrapped map returns
    c_skip * x + c_out * raw_fn(c_in * x, c_noise).
    """

    def denoise(x, sigma):
        sigma = float(sigma)
        if sigma <= 0:
            raise DomainError("preconditioned denoiser requires sigma > 0")
        x = np.asarray(x, dtype=np.float64)
        raw = raw_fn(pc.c_in(sigma) * x, pc.c_noise(sigma))
        return pc.c_skip(sigma) * x + pc.c_out(sigma) * raw

    return denoise


@dataclass(frozen=True)
class GuidanceSpec:
    """How to steer sampling: mode, strength, active sigma interval, target."""

    mode: str = "none"
    scale: float = 1.0
    sigma_lo: float = 0.0
    sigma_hi: float = math.inf
    target: int | float | tuple | None = None

    def __post_init__(self):
        if self.mode not in ("none", "cfg", "classifier"):
            raise DomainError(f"unknown guidance mode {self.mode!r}")
        if not math.isfinite(self.scale):
            raise DomainError("guidance scale must be finite")
        if self.sigma_lo > self.sigma_hi:
            raise DomainError("guidance interval requires sigma_lo <= sigma_hi")

    def active(self, sigma: float) -> bool:
        return self.sigma_lo <= sigma <= self.sigma_hi


def cfg_combine(cond, uncond, scale: float):
    """Blend conditional and unconditional predictions.

    (1 - scale) * uncond + scale * cond; scale > 1 extrapolates past the
    conditional prediction away from the unconditional one.  Valid in score
    or denoiser space, since the two are related affinely at fixed (x, sigma).
    """
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise DomainError("cond and uncond must have the same shape")
    return (1.0 - scale) * uncond + scale * cond


def classifier_guided_score(score_uncond, classifier_logprob_grad, scale: float):
    """Shift an unconditional score by a scaled classifier log-prob gradient."""
    score_uncond = np.asarray(score_uncond, dtype=np.float64)
    grad = np.asarray(classifier_logprob_grad, dtype=np.float64)
    if score_uncond.shape != grad.shape:
        raise DomainError("score and classifier gradient must have the same shape")
    return score_uncond + scale * grad
