"""Shared test utilities: finite-difference oracles and small builders."""

from __future__ import annotations

import numpy as np

from twindiff import nn


def central_difference(loss_fn, param: nn.Var, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of loss_fn() w.r.t. every entry of ``param``,
    obtained by re-running the forward computation with perturbed values."""
    flat = param.value.ravel()
    out = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = loss_fn()
        flat[j] = orig - h
        fm = loss_fn()
        flat[j] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out.reshape(param.value.shape)


def fd_agreement(loss_builder, params: dict[str, nn.Var],
                 h: float = 1e-5, rtol: float = 1e-4) -> tuple[int, int]:
    """Compare analytic gradients against central differences.

    ``loss_builder`` must build a fresh loss graph from the current
    parameter values each call. An entry passes when it is within rtol or
    when the difference sits below the central-difference resolution limit
    (~|loss| * eps / h), which is all the oracle itself can measure for
    near-zero gradients. Returns (passing entries, total entries).
    """
    loss0 = loss_builder()
    grads = nn.backward(loss0, params)
    fd_noise = 100.0 * max(1e-8, abs(float(loss0.value))) * np.finfo(float).eps / h

    def scalar_loss():
        return float(loss_builder().value)

    ok = total = 0
    for name, p in params.items():
        fd = central_difference(scalar_loss, p, h)
        an = grads[name]
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
        rel = np.abs(an - fd) / denom
        ok += int(((rel <= rtol) | (np.abs(an - fd) <= fd_noise)).sum())
        total += an.size
    return ok, total


def tiny_net(rng, in_dim=2, cond_dim=3, out_dim=2, hidden=(3, 4, 5), emb_dim=2):
    return nn.DiffusionMLP(in_dim, cond_dim, out_dim, hidden, emb_dim, rng)
