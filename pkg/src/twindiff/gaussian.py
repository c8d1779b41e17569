"""Gaussian diffusion over the continuous columns: closed-form forward
noising, the noise-prediction loss, the reverse transition, and recovery of
the clean sample from a noise estimate.

All functions accept either plain arrays or graph nodes (``nn.Var``) for the
network-output argument, so the same formulas serve sampling and training.
``t`` may be one timestep for the whole batch or a per-row int array.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import ConfigError
from .schedule import NoiseSchedule


def _per_row(values, t):
    """Schedule coefficients broadcastable against a (B, N) batch."""
    return float(values) if np.ndim(t) == 0 else np.asarray(values)[:, None]


def forward_sample_cont(x0, t, eps, sched: NoiseSchedule):
    """Noised sample at step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    sched.check_t(t)
    if np.shape(eps) != np.shape(x0):
        raise ConfigError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    ab = _per_row(sched.alpha_bar_at(t), t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def forward_step_cont(x_prev, t, noise, sched: NoiseSchedule):
    """Single forward transition t-1 -> t (used by chain-equivalence checks)."""
    sched.check_t(t)
    b = _per_row(sched.beta_at(t), t)
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(noise)


def loss_diff_c(eps_pred, eps) -> nn.Var:
    """Noise-matching loss: batch mean of the per-row squared error norm."""
    eps_pred = nn.as_var(eps_pred)
    if eps_pred.value.shape != np.shape(eps):
        raise ConfigError(
            f"prediction shape {eps_pred.value.shape} != target shape {np.shape(eps)}"
        )
    diff = nn.sub(nn.as_var(eps), eps_pred)
    rows = nn.vsum(nn.mul(diff, diff), axis=1)
    return nn.vmean(rows)


def reverse_mean_cont(x_t, eps_pred, t, sched: NoiseSchedule):
    """Posterior mean: (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)."""
    sched.check_t(t)
    b = _per_row(sched.beta_at(t), t)
    a = _per_row(sched.alpha_at(t), t)
    ab = _per_row(sched.alpha_bar_at(t), t)
    return (np.asarray(x_t) - (b / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(a)


def reverse_sigma(t, sched: NoiseSchedule):
    """Fixed reverse std: sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t.

    With abar_0 = 1 this makes the final step (t = 1) deterministic.
    """
    sched.check_t(t)
    t = np.asarray(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    ab = sched.alpha_bar_at(t)
    return np.sqrt((1.0 - ab_prev) / (1.0 - ab) * sched.beta_at(t))


def reverse_step_cont(x_t, eps_pred, t, noise, sched: NoiseSchedule):
    """One reverse transition; adds sigma_t * noise except at t = 1."""
    sched.check_t(t)
    mu = reverse_mean_cont(x_t, eps_pred, t, sched)
    if np.ndim(t) == 0 and int(t) == 1:
        return mu
    sig = _per_row(reverse_sigma(t, sched), t)
    return mu + sig * np.asarray(noise)


def predict_x0_cont(x_t, eps_pred, t, sched: NoiseSchedule):
    """Invert the closed-form forward map given a noise estimate."""
    sched.check_t(t)
    ab = _per_row(sched.alpha_bar_at(t), t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
