"""Variance schedules for the forward noising process.

A schedule of ``T`` steps holds, per step t (1-based), the noise variance
beta_t, alpha_t = 1 - beta_t, the cumulative product alpha_bar_t, and the
posterior variance used by the ancestral sampler. Coefficients are kept in
float64; callers cast when mixing with float32 image data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COSINE_BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and derived cumulative quantities (index t-1 = step t)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"step t={t} outside [1, {self.steps}]")


def _derive(beta: np.ndarray) -> NoiseSchedule:
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # posterior variance of x_{t-1} given (x_t, x_0); the t=1 entry is beta_1
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior = beta * (1.0 - prev) / (1.0 - alpha_bar)
    posterior[0] = beta[0]
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         posterior_variance=posterior)


def linear_schedule(steps: int, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    """Evenly spaced variances from beta_start to beta_end inclusive."""
    if steps < 2:
        raise ValueError(f"linear schedule needs at least 2 steps, got {steps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return _derive(beta)


def cosine_schedule(steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine decay of alpha_bar, with per-step betas capped at 0.999."""
    if steps < 2:
        raise ValueError(f"cosine schedule needs at least 2 steps, got {steps}")
    if offset <= 0.0:
        raise ValueError(f"cosine offset must be positive, got {offset}")
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos(((t / steps + offset) / (1.0 + offset)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta = np.clip(beta, None, COSINE_BETA_MAX)
    # re-derive alpha_bar from the clipped betas so the cumulative identity holds
    return _derive(beta)
