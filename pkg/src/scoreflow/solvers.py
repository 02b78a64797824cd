"""Reverse-process integrators in the unit-scale frame.

Deterministic solvers integrate dx/dsigma = (x - D(x, sigma)) / sigma from
sigma_max down to 0 along a StepGrid; the multistep exponential integrators
change variables to lam = -log(sigma), where the same equation becomes the
semi-linear dx/dlam = -x + D and admits exact integration against polynomial
interpolants of D.  A reverse SDE baseline (Euler-Maruyama) and guidance
wrapping live here too.

Every solver takes a DenoiserHandle, counts one NFE per evaluation (batched
evaluations count once, matching per-sample NFE), and fails fast with the
step index if the state leaves the finite range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    MissingAuxiliaryError,
    NumericalDivergenceError,
)
from .parameterization import GuidanceSpec, cfg_combine
from .schedules import StepGrid


class DenoiserHandle:
    """A denoiser D(x, sigma) -> x0_hat with an evaluation counter."""

    def __init__(self, fn, name: str = "denoiser"):
        self._fn = fn
        self.name = name
        self.nfe = 0

    def __call__(self, x, sigma, condition=None):
        self.nfe += 1
        if condition is None:
            return self._fn(x, sigma)
        return self._fn(x, sigma, condition)

    def reset(self):
        self.nfe = 0


@dataclass
class Trajectory:
    """Per-step record of (sigma, state, denoiser output) along one solve."""

    sigmas: list = field(default_factory=list)
    states: list = field(default_factory=list)
    denoised: list = field(default_factory=list)

    def append(self, sigma: float, x, d=None):
        self.sigmas.append(float(sigma))
        self.states.append(np.array(x, copy=True))
        self.denoised.append(None if d is None else np.array(d, copy=True))

    def __len__(self):
        return len(self.sigmas)


def _sigmas_of(grid) -> np.ndarray:
    if isinstance(grid, StepGrid):
        return grid.sigmas
    return np.asarray(grid, dtype=np.float64)


def _check_finite(x, step: int):
    if not np.all(np.isfinite(x)):
        raise NumericalDivergenceError(
            f"non-finite state at step {step}", step=step
        )


def euler_solve(handle: DenoiserHandle, grid, x_t, trajectory: Trajectory | None = None):
    """First-order integration of dx/dsigma = (x - D) / sigma.  NFE = N."""
    sigmas = _sigmas_of(grid)
    x = np.asarray(x_t, dtype=np.float64).copy()
    _check_finite(x, -1)
    for i in range(sigmas.size - 1):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        denoised = handle(x, sigma)
        if trajectory is not None:
            trajectory.append(sigma, x, denoised)
        d = (x - denoised) / sigma
        x = x + (sigma_next - sigma) * d
        _check_finite(x, i)
    if trajectory is not None and sigmas.size:
        trajectory.append(sigmas[-1], x)
    return x


def heun_solve(handle: DenoiserHandle, grid, x_t, trajectory: Trajectory | None = None):
    """Euler predictor with trapezoidal correction.

    The correction is skipped on the final step to sigma = 0 where the slope
    is undefined.  NFE = 2N - 1.
    """
    sigmas = _sigmas_of(grid)
    x = np.asarray(x_t, dtype=np.float64).copy()
    _check_finite(x, -1)
    for i in range(sigmas.size - 1):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        denoised = handle(x, sigma)
        if trajectory is not None:
            trajectory.append(sigma, x, denoised)
        d = (x - denoised) / sigma
        x_pred = x + (sigma_next - sigma) * d
        if sigma_next == 0.0:
            x = x_pred
        else:
            d_next = (x_pred - handle(x_pred, sigma_next)) / sigma_next
            x = x + (sigma_next - sigma) * 0.5 * (d + d_next)
        _check_finite(x, i)
    if trajectory is not None and sigmas.size:
        trajectory.append(sigmas[-1], x)
    return x


def _phi_integrals(h: float, k: int) -> np.ndarray:
    """J_m = integral of e^u u^m du over [-h, 0], for m = 0..k-1."""
    J = np.empty(k)
    J[0] = -math.expm1(-h)
    e = math.exp(-h)
    for m in range(1, k):
        J[m] = -e * (-h) ** m - m * J[m - 1]
    return J


def _ei_step(x, lam_cur: float, lam_next: float, lams, denos):
    """One exponential-integrator step over [lam_cur, lam_next].

    Integrates the interpolating polynomial through (lam_j, D_j) exactly
    against the e^(lam - lam_next) kernel.  The interpolation nodes need not
    coincide with the interval endpoints (the corrector includes lam_next).
    """
    k = len(lams)
    h = lam_next - lam_cur
    u = np.asarray(lams, dtype=np.float64) - lam_next
    J = _phi_integrals(h, k)
    if k == 1:
        weights = J
    else:
        vander = np.vander(u, k, increasing=True)  # V[j, m] = u_j^m
        weights = np.linalg.solve(vander.T, J)
    out = math.exp(-h) * x
    for w, d in zip(weights, denos):
        out = out + w * d
    return out


def dpmpp_solve(handle: DenoiserHandle, grid, x_t, order: int = 3,
                trajectory: Trajectory | None = None):
    """Multistep exponential integrator in lam = -log(sigma).  NFE = N.

    Reuses previous denoiser outputs as interpolation nodes; warm-up ramps
    the effective order 1, 2, ..., order.  The final step to sigma = 0 is
    the h -> inf limit of the order-1 update, i.e. the last denoised value.
    """
    if order not in (1, 2, 3):
        raise DomainError(f"order must be 1, 2, or 3, got {order}")
    sigmas = _sigmas_of(grid)
    x = np.asarray(x_t, dtype=np.float64).copy()
    _check_finite(x, -1)
    hist_lam: list[float] = []
    hist_d: list[np.ndarray] = []
    for i in range(sigmas.size - 1):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        denoised = handle(x, sigma)
        if trajectory is not None:
            trajectory.append(sigma, x, denoised)
        hist_lam.append(-math.log(sigma))
        hist_d.append(denoised)
        if len(hist_lam) > order:
            hist_lam.pop(0)
            hist_d.pop(0)
        if sigma_next == 0.0:
            x = denoised
        else:
            x = _ei_step(x, hist_lam[-1], -math.log(sigma_next), hist_lam, hist_d)
        _check_finite(x, i)
    if trajectory is not None and sigmas.size:
        trajectory.append(sigmas[-1], x)
    return x


def unipc_solve(handle: DenoiserHandle, grid, x_t, order: int = 3,
                trajectory: Trajectory | None = None):
    """Predictor-corrector exponential integrator.  NFE = N + 1.

    Predicts with the multistep rule at order - 1, evaluates the denoiser at
    the predicted point, then recomputes the step with the interpolation set
    augmented by the new node (collocation correction).  That evaluation is
    reused as the next step's history; the final step to sigma = 0 spends
    one extra evaluation at the corrected state.
    """
    if order not in (2, 3, 4):
        raise DomainError(f"order must be 2, 3, or 4, got {order}")
    sigmas = _sigmas_of(grid)
    x = np.asarray(x_t, dtype=np.float64).copy()
    _check_finite(x, -1)
    if sigmas.size < 2:
        return x
    hist_lam = [-math.log(sigmas[0])]
    hist_d = [handle(x, sigmas[0])]
    if trajectory is not None:
        trajectory.append(sigmas[0], x, hist_d[0])
    for i in range(sigmas.size - 1):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        if sigma_next == 0.0:
            x = handle(x, sigma)
            _check_finite(x, i)
            break
        lam_cur = -math.log(sigma)
        lam_next = -math.log(sigma_next)
        k_pred = min(order - 1, len(hist_lam))
        x_pred = _ei_step(x, lam_cur, lam_next, hist_lam[-k_pred:], hist_d[-k_pred:])
        _check_finite(x_pred, i)
        d_new = handle(x_pred, sigma_next)
        k_corr = min(order, len(hist_lam) + 1)
        x = _ei_step(
            x, lam_cur, lam_next,
            hist_lam[-(k_corr - 1):] + [lam_next],
            hist_d[-(k_corr - 1):] + [d_new],
        )
        _check_finite(x, i)
        hist_lam.append(lam_next)
        hist_d.append(d_new)
        if len(hist_lam) > order:
            hist_lam.pop(0)
            hist_d.pop(0)
        if trajectory is not None:
            trajectory.append(sigma_next, x, d_new)
    if trajectory is not None:
        trajectory.append(sigmas[-1], x)
    return x


def sde_euler_maruyama(score_fn, grid, x_t, rng: np.random.Generator,
                       trajectory: Trajectory | None = None):
    """Reverse-SDE baseline with g(t) = sqrt(2 t) and zero drift.

    Per step with delta = sigma_next - sigma < 0:
        x <- x - 2 sigma score(x, sigma) delta + sqrt(2 sigma) sqrt(-delta) n.
    Setting the injected noise to zero and halving the drift recovers the
    deterministic Euler update exactly.
    """
    sigmas = _sigmas_of(grid)
    x = np.asarray(x_t, dtype=np.float64).copy()
    _check_finite(x, -1)
    for i in range(max(sigmas.size - 1, 0)):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        delta = sigma_next - sigma
        score = score_fn(x, sigma)
        noise = rng.standard_normal(x.shape)
        x = x - 2.0 * sigma * score * delta + math.sqrt(2.0 * sigma) * math.sqrt(-delta) * noise
        _check_finite(x, i)
        if trajectory is not None:
            trajectory.append(sigma_next, x)
    return x


def score_from_denoiser(handle: DenoiserHandle):
    """Adapter: score(x, sigma) = (D(x, sigma) - x) / sigma^2."""

    def score(x, sigma):
        return (handle(x, sigma) - x) / float(sigma) ** 2

    return score


class GuidedDenoiser:
    """DenoiserHandle-compatible wrapper applying guidance in an interval."""

    def __init__(self, base: DenoiserHandle, spec: GuidanceSpec, aux=None):
        if spec.mode == "cfg" and aux is None:
            raise MissingAuxiliaryError("cfg guidance needs an unconditional handle")
        if spec.mode == "classifier" and aux is None:
            raise MissingAuxiliaryError(
                "classifier guidance needs a log-prob gradient provider"
            )
        self.base = base
        self.spec = spec
        self.aux = aux
        self.nfe = 0
        self.name = f"{base.name}+{spec.mode}"

    def __call__(self, x, sigma, condition=None):
        spec = self.spec
        if spec.mode == "none" or not spec.active(sigma):
            self.nfe += 1
            return self.base(x, sigma, condition)
        if spec.mode == "cfg":
            self.nfe += 2
            cond = self.base(x, sigma, condition)
            uncond = self.aux(x, sigma)
            return cfg_combine(cond, uncond, spec.scale)
        # classifier: shift the unconditional score by the classifier gradient
        self.nfe += 1
        d_uncond = self.base(x, sigma, condition)
        return d_uncond + float(sigma) ** 2 * spec.scale * self.aux(x, sigma)

    def reset(self):
        self.nfe = 0


def guided_denoiser(base: DenoiserHandle, spec: GuidanceSpec, aux=None):
    """Wrap a handle with guidance; pass-through when mode is none."""
    if spec.mode == "none":
        return base
    return GuidedDenoiser(base, spec, aux)


def warm_start_init(y, sigma_start: float, rng: np.random.Generator):
    """Informed initialization: center the start on an observation y."""
    if sigma_start <= 0:
        raise DomainError("sigma_start must be positive")
    y = np.asarray(y, dtype=np.float64)
    return y + sigma_start * rng.standard_normal(y.shape)


SOLVER_KINDS = ("euler", "heun", "dpmpp", "unipc", "sde")


def solve(kind: str, handle, grid, x_t, order: int = 3,
          rng: np.random.Generator | None = None,
          trajectory: Trajectory | None = None):
    """Dispatch one sampling run by solver kind."""
    if kind == "euler":
        return euler_solve(handle, grid, x_t, trajectory)
    if kind == "heun":
        return heun_solve(handle, grid, x_t, trajectory)
    if kind == "dpmpp":
        return dpmpp_solve(handle, grid, x_t, order, trajectory)
    if kind == "unipc":
        return unipc_solve(handle, grid, x_t, order, trajectory)
    if kind == "sde":
        if rng is None:
            raise DomainError("sde solver needs an rng")
        return sde_euler_maruyama(score_from_denoiser(handle), grid, x_t, rng,
                                  trajectory)
    raise DomainError(f"unknown solver kind {kind!r}")
