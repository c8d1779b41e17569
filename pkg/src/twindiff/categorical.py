"""Multinomial diffusion over the discrete columns.

Discrete rows live in a single (batch, sum_K) matrix of concatenated
per-column blocks; ``sizes`` gives the category count of each block. The
single-step kernel mixes the current state with the uniform distribution,
so the t-step marginal, the posterior q(x_{t-1} | x_t, x_0) and the
parameterized reverse distribution all have closed forms:

    marginal:   abar_t * x0 + (1 - abar_t) / K
    posterior:  normalize[ (a_t * x_t + (1 - a_t)/K) * (abar_{t-1} * x0 + (1 - abar_{t-1})/K) ]

The posterior is linear in x0, so marginalizing it over a predicted x0
distribution equals evaluating it at that distribution.

Functions accept plain arrays everywhere; the ones that take the network
output (``x0_logits``) also accept graph nodes and then return graph nodes.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import ConfigError, NumericsError, ShapeError
from .schedule import NoiseSchedule

LOG_FLOOR = 1e-30  # probabilities are clamped here before log


def block_slices(sizes) -> list[tuple[int, int]]:
    offs = np.cumsum([0] + list(sizes))
    return [(int(a), int(b)) for a, b in zip(offs[:-1], offs[1:])]


def check_block_width(arr, sizes, what: str) -> None:
    width = int(np.sum(sizes))
    if np.ndim(arr) != 2 or np.shape(arr)[1] != width:
        raise ShapeError(f"{what}: expected (batch, {width}) for blocks {tuple(sizes)}, "
                         f"got shape {np.shape(arr)}")


def check_normalized(probs, sizes, what: str, atol: float = 1e-6) -> None:
    check_block_width(probs, sizes, what)
    for j0, j1 in block_slices(sizes):
        s = np.asarray(probs)[:, j0:j1].sum(axis=1)
        if not np.allclose(s, 1.0, atol=atol):
            raise ConfigError(f"{what}: block {j0}:{j1} rows do not sum to 1")


def check_one_hot(x, sizes, what: str) -> None:
    check_normalized(x, sizes, what, atol=1e-9)
    vals = np.asarray(x)
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ConfigError(f"{what}: entries must be exactly 0 or 1")


def uniform_probs(rows: int, sizes) -> np.ndarray:
    """Per-block uniform distributions (the terminal prior)."""
    out = np.empty((rows, int(np.sum(sizes))))
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        out[:, j0:j1] = 1.0 / k
    return out


def _per_row(values, t):
    return float(values) if np.ndim(t) == 0 else np.asarray(values)[:, None]


def forward_marginal_cat(x0, t, sched: NoiseSchedule, sizes) -> np.ndarray:
    """Distribution of x_t given a one-hot x0."""
    sched.check_t(t)
    check_one_hot(x0, sizes, "x0")
    ab = _per_row(sched.alpha_bar_at(t), t)
    out = np.empty_like(np.asarray(x0, dtype=np.float64))
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        out[:, j0:j1] = ab * np.asarray(x0)[:, j0:j1] + (1.0 - ab) / k
    return out


def forward_step_cat(x_prev, t, sched: NoiseSchedule, sizes) -> np.ndarray:
    """Single-step transition distribution from the state at t-1."""
    sched.check_t(t)
    check_normalized(x_prev, sizes, "x_prev")
    b = _per_row(sched.beta_at(t), t)
    out = np.empty_like(np.asarray(x_prev, dtype=np.float64))
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        out[:, j0:j1] = (1.0 - b) * np.asarray(x_prev)[:, j0:j1] + b / k
    return out


def sample_cat(probs, sizes, rng: np.random.Generator) -> np.ndarray:
    """Draw one category per block per row; returns one-hot."""
    check_normalized(probs, sizes, "probs")
    probs = np.asarray(probs)
    out = np.zeros_like(probs)
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        cdf = np.cumsum(probs[:, j0:j1], axis=1)
        u = rng.random((probs.shape[0], 1))
        idx = np.minimum((cdf < u).sum(axis=1), k - 1)
        out[np.arange(probs.shape[0]), j0 + idx] = 1.0
    return out


def argmax_onehot(scores, sizes) -> np.ndarray:
    """Deterministic decode: per-block argmax, ties to the lowest index."""
    check_block_width(scores, sizes, "scores")
    scores = np.asarray(scores)
    out = np.zeros_like(scores, dtype=np.float64)
    for j0, j1 in block_slices(sizes):
        idx = np.argmax(scores[:, j0:j1], axis=1)
        out[np.arange(scores.shape[0]), j0 + idx] = 1.0
    return out


def softmax_blocks(logits, sizes):
    """Per-block softmax; returns a graph node iff ``logits`` is one."""
    check_block_width(logits if not isinstance(logits, nn.Var) else logits.value,
                      sizes, "logits")
    if isinstance(logits, nn.Var):
        parts = [nn.softmax_rows(nn.slice_cols(logits, j0, j1))
                 for j0, j1 in block_slices(sizes)]
        return nn.concat_cols(parts)
    logits = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(logits)
    for j0, j1 in block_slices(sizes):
        z = logits[:, j0:j1] - logits[:, j0:j1].max(axis=1, keepdims=True)
        e = np.exp(z)
        out[:, j0:j1] = e / e.sum(axis=1, keepdims=True)
    return out


def posterior_cat(x_t, x0, t, sched: NoiseSchedule, sizes):
    """q(x_{t-1} | x_t, x0) for t >= 2, evaluated per block and renormalized.

    ``x0`` may be one-hot, a distribution, or a graph node carrying a
    predicted distribution; the result mirrors the input kind.
    """
    sched.check_t(t)
    if np.any(np.asarray(t) < 2):
        raise ConfigError(f"posterior needs t >= 2, got {t}")
    check_one_hot(x_t, sizes, "x_t")
    a = _per_row(sched.alpha_at(t), t)
    ab_prev = _per_row(sched.alpha_bar_at(np.asarray(t) - 1), t)
    x_t = np.asarray(x_t, dtype=np.float64)

    if isinstance(x0, nn.Var):
        parts = []
        for (j0, j1), k in zip(block_slices(sizes), sizes):
            fac1 = a * x_t[:, j0:j1] + (1.0 - a) / k            # constant
            fac2 = ab_prev * nn.slice_cols(x0, j0, j1) + (1.0 - ab_prev) / k
            unnorm = nn.mul(nn.as_var(fac1), fac2)
            norm = nn.vsum(unnorm, axis=1, keepdims=True)
            if np.any(norm.value <= 0.0):
                raise NumericsError("posterior normalizer vanished")
            parts.append(nn.div(unnorm, norm))
        return nn.concat_cols(parts)

    x0 = np.asarray(x0, dtype=np.float64)
    check_normalized(x0, sizes, "x0")
    out = np.empty_like(x_t)
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        fac1 = a * x_t[:, j0:j1] + (1.0 - a) / k
        fac2 = ab_prev * x0[:, j0:j1] + (1.0 - ab_prev) / k
        unnorm = fac1 * fac2
        norm = unnorm.sum(axis=1, keepdims=True)
        if np.any(norm <= 0.0):
            raise NumericsError("posterior normalizer vanished")
        out[:, j0:j1] = unnorm / norm
    return out


def reverse_dist_cat(x_t, x0_logits, t, sched: NoiseSchedule, sizes):
    """p(x_{t-1} | x_t) for t >= 2: the posterior marginalized over the
    predicted x0 distribution, which by linearity is the posterior evaluated
    at softmax(x0_logits)."""
    return posterior_cat(x_t, softmax_blocks(x0_logits, sizes), t, sched, sizes)


def nll_rows(x0, dist, sizes) -> nn.Var:
    """Per-row negative log-likelihood of one-hot x0 under a distribution,
    summed over blocks (also the cross-entropy distance used elsewhere)."""
    check_one_hot(x0, sizes, "x0")
    logp = nn.log(nn.clip_min(nn.as_var(dist), LOG_FLOOR))
    return nn.vsum(nn.mul(nn.as_var(np.asarray(x0, dtype=np.float64)), logp),
                   axis=1) * -1.0


def kl_rows(q, p, sizes) -> nn.Var:
    """Per-row KL(q || p) summed over blocks; q is a constant distribution."""
    q = np.asarray(q, dtype=np.float64)
    check_normalized(q, sizes, "q")
    qlogq = np.where(q > 0.0, q * np.log(np.maximum(q, LOG_FLOOR)), 0.0).sum(axis=1)
    logp = nn.log(nn.clip_min(nn.as_var(p), LOG_FLOOR))
    cross = nn.vsum(nn.mul(nn.as_var(q), logp), axis=1)
    return nn.as_var(qlogq) - cross


def loss_diff_d(x0, x_t, x0_logits, t, sched: NoiseSchedule, sizes) -> nn.Var:
    """Variational-bound training term for the sampled timestep.

    t >= 2 rows contribute KL(posterior(x0) || posterior(softmax(logits)));
    t = 1 rows contribute the reconstruction negative log-likelihood. The
    constant prior term is excluded (it carries no gradient). Result is the
    batch mean of the per-row sums over columns.
    """
    sched.check_t(t)
    check_one_hot(x0, sizes, "x0")
    check_one_hot(x_t, sizes, "x_t")
    logits = x0_logits if isinstance(x0_logits, nn.Var) else nn.as_var(x0_logits)
    rows = np.shape(x0)[0]

    if np.ndim(t) == 0:
        if int(t) == 1:
            per_row = nll_rows(x0, softmax_blocks(logits, sizes), sizes)
        else:
            q = posterior_cat(x_t, x0, t, sched, sizes)
            p = reverse_dist_cat(x_t, logits, t, sched, sizes)
            per_row = kl_rows(q, p, sizes)
        return nn.vmean(per_row)

    t = np.asarray(t)
    if t.shape != (rows,):
        raise ShapeError(f"per-row t: expected shape ({rows},), got {t.shape}")
    total = nn.as_var(0.0)
    i1 = np.flatnonzero(t == 1)
    i2 = np.flatnonzero(t >= 2)
    if i1.size:
        sub = nll_rows(np.asarray(x0)[i1], softmax_blocks(nn.take_rows(logits, i1), sizes), sizes)
        total = total + nn.vsum(sub)
    if i2.size:
        q = posterior_cat(np.asarray(x_t)[i2], np.asarray(x0)[i2], t[i2], sched, sizes)
        p = reverse_dist_cat(np.asarray(x_t)[i2], nn.take_rows(logits, i2), t[i2], sched, sizes)
        total = total + nn.vsum(kl_rows(q, p, sizes))
    return total * (1.0 / rows)


def prior_kl(x0, sched: NoiseSchedule, sizes) -> float:
    """KL between the terminal forward marginal and the uniform prior,
    summed over columns and averaged over the batch. Parameter-free; useful
    only as a diagnostic for how well the chain mixes by t = T."""
    q = forward_marginal_cat(x0, sched.timesteps, sched, sizes)
    total = np.zeros(np.shape(x0)[0])
    for (j0, j1), k in zip(block_slices(sizes), sizes):
        blk = q[:, j0:j1]
        total += (blk * np.log(np.maximum(blk * k, LOG_FLOOR))).sum(axis=1)
    return float(total.mean())
