"""Diffusion noise timetable: betas, alphas and cumulative gammas."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

# Defaults as literally published; override both endpoints via config.
REFERENCE_BETA_START = 1e-5
REFERENCE_BETA_END = 1e-3
REFERENCE_STEPS = 2000


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise levels for steps t = 1..T.

    ``beta[t-1]`` and ``alpha[t-1]`` hold step t; ``gamma`` has T+1 entries with
    ``gamma[0] == 1`` and ``gamma[t] = gamma[t-1] * alpha[t-1]``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def gamma_at(self, t):
        return self.gamma[np.asarray(t)]


def make_linear_schedule(beta_start=REFERENCE_BETA_START, beta_end=REFERENCE_BETA_END, steps=REFERENCE_STEPS):
    if not isinstance(steps, (int, np.integer)) or steps < 1:
        raise ConfigError(f"steps must be a positive integer, got {steps!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, steps) if steps > 1 else np.array([beta_start], float)
    alpha = 1.0 - beta
    gamma = np.empty(steps + 1)
    gamma[0] = 1.0
    for t in range(1, steps + 1):
        gamma[t] = gamma[t - 1] * alpha[t - 1]
    for arr in (beta, alpha, gamma):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, gamma)


def sample_noise_level(schedule, rng, size=None):
    """Draw t uniformly from {1..T}; return (t, gamma_t)."""
    t = rng.integers(1, schedule.T + 1, size=size)
    return t, schedule.gamma[t]


def forward_noise(y0, gamma, eps):
    """Noisy target ``sqrt(gamma) * y0 + sqrt(1 - gamma) * eps``.

    ``gamma`` may be a scalar or one value per leading-axis sample.
    """
    y0 = np.asarray(getattr(y0, "data", y0), dtype=np.float64)
    eps = np.asarray(getattr(eps, "data", eps), dtype=np.float64)
    if y0.shape != eps.shape:
        raise DimensionError(f"forward_noise: y0 {y0.shape} vs eps {eps.shape}")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0) or np.any(g > 1):
        raise ConfigError("gamma must lie in [0, 1]")
    if g.ndim == 1:
        g = g.reshape((-1,) + (1,) * (y0.ndim - 1))
    return np.sqrt(g) * y0 + np.sqrt(1.0 - g) * eps
