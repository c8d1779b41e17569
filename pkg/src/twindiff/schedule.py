"""Noise schedule shared by both diffusion processes.

Timesteps are 1-based (t = 1..T); accessors take 1-based t and the
cumulative product is defined to be 1 at t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray        # beta[i] is for t = i+1
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def alpha_bar_at(self, t):
        """Cumulative product at 1-based t; t = 0 gives 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ConfigError(f"timestep out of range 1..{self.timesteps}: {t}")


def linear_schedule(timesteps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced variance schedule from beta_start (t=1) to beta_end (t=T)."""
    if timesteps < 2:
        raise ConfigError(f"timesteps must be >= 2, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar)
