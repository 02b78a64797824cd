"""Shared fixtures and independent reference computations for the test suite."""

import math

import numpy as np

from scoreflow.oracle import IsotropicGMM, gmm_denoise, make_gmm
from scoreflow.solvers import DenoiserHandle


def circle_gmm(std: float = 0.15) -> IsotropicGMM:
    """Standard benchmark: 3 components on the unit circle."""
    angles = (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)
    return make_gmm([(1.0 / 3.0, [math.cos(a), math.sin(a)], std) for a in angles])


def two_peak_dirac() -> IsotropicGMM:
    """Two point masses at +-1 (1-D)."""
    return make_gmm([(0.5, [1.0], 0.0), (0.5, [-1.0], 0.0)])


def oracle_handle(gmm: IsotropicGMM) -> DenoiserHandle:
    return DenoiserHandle(lambda x, sigma: gmm_denoise(gmm, x, sigma), name="oracle")


def gaussian_endpoint(mu, sigma_d: float, sigma_max: float, x_t):
    """Closed-form PF-ODE endpoint for single-Gaussian data N(mu, sigma_d^2 I).

    The flow contracts deviations by sigma_d / sqrt(sigma_d^2 + sigma^2):
        x(0) = mu + (x_T - mu) * sigma_d / sqrt(sigma_d^2 + sigma_max^2).
    """
    mu = np.asarray(mu, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    return mu + (x_t - mu) * sigma_d / math.sqrt(sigma_d**2 + sigma_max**2)


def rk4_endpoint(gmm: IsotropicGMM, x_t, sigma_max: float, sigma_stop: float,
                 steps: int):
    """Dense classic Runge-Kutta integration of dx/dsigma = (x - D)/sigma.

    Integrates from sigma_max down to sigma_stop > 0 on a geometric grid;
    independent of every production solver.
    """
    x = np.asarray(x_t, dtype=np.float64).copy()
    sigmas = np.exp(np.linspace(math.log(sigma_max), math.log(sigma_stop), steps + 1))

    def f(xv, sigma):
        return (xv - gmm_denoise(gmm, xv, sigma)) / sigma

    for i in range(steps):
        s0, s1 = sigmas[i], sigmas[i + 1]
        h = s1 - s0
        k1 = f(x, s0)
        k2 = f(x + 0.5 * h * k1, 0.5 * (s0 + s1))
        k3 = f(x + 0.5 * h * k2, 0.5 * (s0 + s1))
        k4 = f(x + h * k3, s1)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
