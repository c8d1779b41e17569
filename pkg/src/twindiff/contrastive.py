"""Negative-condition construction and the triplet losses that couple the
two diffusion models.

A negative condition is the batch with the rows of one variable type
permuted wholesale: each row keeps its own within-type values, but its
cross-type partner becomes some other row's. The triplet loss then pushes
the model's clean-sample estimate under the true condition toward the
anchor and away from the estimate under the shuffled condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import categorical, gaussian, nn
from .errors import ConfigError

METHODS = ("method1", "method2", "method3")
DIST_EPS = 1e-12  # inside the row-norm sqrt; keeps the gradient finite at 0


@dataclass(frozen=True)
class NegativePair:
    """Shuffled condition blocks plus the permutations that made them."""
    neg_cond_c: np.ndarray
    neg_cond_d: np.ndarray
    perm_c: np.ndarray
    perm_d: np.ndarray


def _shuffle_two_columns(block: np.ndarray, col_slices, rng, paired: bool) -> np.ndarray:
    """Row-shuffle two randomly chosen columns, together or independently.
    A type with a single column degrades to shuffling that column."""
    rows = block.shape[0]
    out = block.copy()
    pick = rng.choice(len(col_slices), size=min(2, len(col_slices)), replace=False)
    perm = rng.permutation(rows)
    for which, (j0, j1) in enumerate(col_slices[i] for i in pick):
        if which == 1 and not paired:
            perm = rng.permutation(rows)
        out[:, j0:j1] = block[perm, j0:j1]
    return out


def make_negative_condition(batch_c: np.ndarray, batch_d: np.ndarray,
                            rng: np.random.Generator, sizes,
                            method: str = "method3") -> NegativePair:
    """Build shuffled condition blocks from a batch.

    method3 (default): permute all continuous rows with one draw and all
    discrete rows with an independent draw, keeping each type's columns
    together. method1/method2 shuffle only two randomly chosen columns of
    each type, with a shared / independent permutation respectively.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown negative method {method!r}; one of {METHODS}")
    batch_c = np.asarray(batch_c, dtype=np.float64)
    batch_d = np.asarray(batch_d, dtype=np.float64)
    rows = batch_c.shape[0] if batch_c.size else batch_d.shape[0]
    if rows < 2:
        raise ConfigError("negative conditions need a batch of at least 2 rows")

    if method == "method3":
        perm_c = rng.permutation(rows)
        perm_d = rng.permutation(rows)
        return NegativePair(batch_c[perm_c], batch_d[perm_d], perm_c, perm_d)

    paired = method == "method1"
    ident = np.arange(rows)
    cont_slices = [(j, j + 1) for j in range(batch_c.shape[1])]
    neg_c = _shuffle_two_columns(batch_c, cont_slices, rng, paired) if batch_c.shape[1] else batch_c
    neg_d = _shuffle_two_columns(batch_d, categorical.block_slices(sizes), rng, paired) if batch_d.shape[1] else batch_d
    return NegativePair(neg_c, neg_d, ident, ident)


def euclidean_rows(a, b) -> nn.Var:
    """Per-row Euclidean distance; tiny epsilon under the sqrt so the
    gradient stays finite when the rows coincide."""
    diff = nn.sub(nn.as_var(a), nn.as_var(b))
    return nn.sqrt(nn.vsum(nn.mul(diff, diff), axis=1) + DIST_EPS)


def cross_entropy_rows(anchor_onehot, dist, sizes) -> nn.Var:
    """Per-row cross-entropy from a one-hot anchor to a distribution,
    summed over column blocks."""
    return categorical.nll_rows(anchor_onehot, dist, sizes)


def triplet_hinge(d_ap: nn.Var, d_an: nn.Var, margin: float) -> nn.Var:
    """Batch mean of max(d(A,P) - d(A,N) + margin, 0)."""
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    return nn.vmean(nn.relu(nn.sub(d_ap, d_an) + margin))


def triplet_loss(anchor, positive, negative, metric: str, margin: float,
                 sizes=None) -> nn.Var:
    """Triplet loss under the named row metric ('euclidean' or 'cross_entropy')."""
    if metric == "euclidean":
        return triplet_hinge(euclidean_rows(anchor, positive),
                             euclidean_rows(anchor, negative), margin)
    if metric == "cross_entropy":
        if sizes is None:
            raise ConfigError("cross_entropy metric needs column block sizes")
        return triplet_hinge(cross_entropy_rows(anchor, positive, sizes),
                             cross_entropy_rows(anchor, negative, sizes), margin)
    raise ConfigError(f"unknown metric {metric!r}")


def contrastive_loss_c(x0_c, x_t_c, x_t_d, x_t_d_neg, net_c, t, sched, margin,
                       eps_pos: nn.Var | None = None) -> nn.Var:
    """Triplet loss for the continuous model: clean-sample estimates under
    the true and the shuffled discrete condition, Euclidean metric.

    ``eps_pos`` lets the caller reuse the noise prediction already computed
    for the diffusion loss (same inputs, same graph).
    """
    if eps_pos is None:
        eps_pos = net_c.forward(x_t_c, x_t_d, t)
    eps_neg = net_c.forward(x_t_c, x_t_d_neg, t)
    x0_pos = gaussian.predict_x0_cont(x_t_c, eps_pos, t, sched)
    x0_neg = gaussian.predict_x0_cont(x_t_c, eps_neg, t, sched)
    return triplet_hinge(euclidean_rows(x0_c, x0_pos),
                         euclidean_rows(x0_c, x0_neg), margin)


def contrastive_loss_d(x0_d, x_t_d, x_t_c, x_t_c_neg, net_d, t, sched, margin,
                       sizes=None, logits_pos: nn.Var | None = None) -> nn.Var:
    """Triplet loss for the discrete model: predicted category distributions
    under the true and the shuffled continuous condition, cross-entropy metric."""
    if sizes is None:
        raise ConfigError("contrastive_loss_d needs column block sizes")
    if logits_pos is None:
        logits_pos = net_d.forward(x_t_d, x_t_c, t)
    logits_neg = net_d.forward(x_t_d, x_t_c_neg, t)
    dist_pos = categorical.softmax_blocks(logits_pos, sizes)
    dist_neg = categorical.softmax_blocks(logits_neg, sizes)
    return triplet_hinge(cross_entropy_rows(x0_d, dist_pos, sizes),
                         cross_entropy_rows(x0_d, dist_neg, sizes), margin)
