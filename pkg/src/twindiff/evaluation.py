"""Sample-quality metrics: k-NN coverage, a train-on-fake/test-on-real
harness with built-in linear models, and column-distribution diagnostics.

Distances are Euclidean in the shared encoding space (min-max continuous
plus one-hot discrete). The downstream models are deliberately simple and
deterministic: an L2-regularized multinomial logistic regression fitted by
L-BFGS for classification and closed-form ridge regression for regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .data import CONTINUOUS, Table, TableSchema, encode
from .errors import ConfigError, DataError

_CHUNK = 1024


def metric_space(table: Table, schema: TableSchema) -> np.ndarray:
    """Rows embedded in the common numeric space used for distances."""
    cont, disc = encode(table, schema)
    return np.concatenate([cont, disc], axis=1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    n = x.shape[0]
    if k >= n:
        raise ConfigError(f"k = {k} needs more than k rows, got {n}")
    radii = np.empty(n)
    for i0 in range(0, n, _CHUNK):
        i1 = min(i0 + _CHUNK, n)
        d = _sq_dists(x[i0:i1], x)
        d[np.arange(i0, i1) - i0, np.arange(i0, i1)] = np.inf  # exclude self
        radii[i0:i1] = np.sqrt(np.partition(d, k - 1, axis=1)[:, k - 1])
    return radii


def _min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each row of a to its nearest row of b."""
    out = np.empty(a.shape[0])
    for i0 in range(0, a.shape[0], _CHUNK):
        i1 = min(i0 + _CHUNK, a.shape[0])
        out[i0:i1] = np.sqrt(_sq_dists(a[i0:i1], b).min(axis=1))
    return out


def coverage(fake: np.ndarray, real: np.ndarray, k: int = 5,
             direction: str = "real") -> float:
    """k-NN coverage between two embedded point sets.

    direction='real' (default): the fraction of real points with at least
    one fake point inside the real point's k-NN radius (radii measured
    among the real points). direction='fake' flips the roles: the fraction
    of fake points with a real point inside the fake point's k-NN radius.
    """
    fake = np.asarray(fake, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if direction == "real":
        radii = knn_radii(real, k)
        return float((_min_dists(real, fake) < radii).mean())
    if direction == "fake":
        radii = knn_radii(fake, k)
        return float((_min_dists(fake, real) < radii).mean())
    raise ConfigError(f"unknown coverage direction {direction!r}")


def nn1_predict(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray) -> np.ndarray:
    """Label each query row with its nearest training row's label."""
    out = np.empty(query_x.shape[0], dtype=train_y.dtype)
    for i0 in range(0, query_x.shape[0], _CHUNK):
        i1 = min(i0 + _CHUNK, query_x.shape[0])
        out[i0:i1] = train_y[_sq_dists(query_x[i0:i1], train_x).argmin(axis=1)]
    return out


def nn1_loo_accuracy(x: np.ndarray, y: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy (self-matches excluded)."""
    n = x.shape[0]
    correct = 0
    for i0 in range(0, n, _CHUNK):
        i1 = min(i0 + _CHUNK, n)
        d = _sq_dists(x[i0:i1], x)
        d[np.arange(i0, i1) - i0, np.arange(i0, i1)] = np.inf
        correct += int((y[d.argmin(axis=1)] == y[i0:i1]).sum())
    return correct / n


# ---------------------------------------------------------------------------
# built-in downstream models

def fit_logistic(x: np.ndarray, y_idx: np.ndarray, n_classes: int,
                 l2: float = 1e-3) -> np.ndarray:
    """L2-regularized multinomial logistic regression; returns (d+1, C)
    weights with the intercept in the last row. Convex, so the L-BFGS fit
    is deterministic."""
    n, d = x.shape
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_idx] = 1.0

    def objective(wflat):
        w = wflat.reshape(d + 1, n_classes)
        z = xb @ w
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        nll = -np.log(np.maximum(p[np.arange(n), y_idx], 1e-300)).mean()
        reg = 0.5 * l2 * (w[:-1] ** 2).sum()
        grad = xb.T @ (p - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return nll + reg, grad.ravel()

    w0 = np.zeros((d + 1) * n_classes)
    res = minimize(objective, w0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 500, "ftol": 1e-12})
    return res.x.reshape(d + 1, n_classes)


def predict_proba(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    z = xb @ w
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_ridge(x: np.ndarray, y: np.ndarray, l2: float = 1e-3) -> np.ndarray:
    """Closed-form ridge regression with an unpenalized intercept."""
    n, d = x.shape
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    a = xb.T @ xb / n
    a[np.arange(d), np.arange(d)] += l2
    return np.linalg.solve(a, xb.T @ y / n)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUROC with tie correction; labels are 0/1."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_score(y_true: np.ndarray, y_pred: np.ndarray, positive: int) -> float:
    tp = int(((y_pred == positive) & (y_true == positive)).sum())
    fp = int(((y_pred == positive) & (y_true != positive)).sum())
    fn = int(((y_pred != positive) & (y_true == positive)).sum())
    return 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> float:
    return float(np.mean([f1_score(y_true, y_pred, c) for c in range(n_classes)]))


def _features_and_target(table: Table, schema: TableSchema):
    feat_cols = tuple(c for c in schema.columns if c.name != schema.target)
    feat_schema = TableSchema(feat_cols)
    j = table.header.index(schema.target)
    kept = [c.name for c in feat_cols]
    idx = [table.header.index(nm) for nm in kept]
    sub = Table(kept, [[row[i] for i in idx] for row in table.rows])
    x = metric_space(sub, feat_schema)
    target_col = schema.column(schema.target)
    if target_col.kind == CONTINUOUS:
        y = np.asarray([row[j] for row in table.rows], dtype=np.float64)
    else:
        index = {c: i for i, c in enumerate(target_col.categories)}
        y = np.asarray([index[str(row[j])] for row in table.rows])
    return x, y, target_col


def tstr(fake_train: Table, real_test: Table, schema: TableSchema,
         l2: float = 1e-3) -> dict:
    """Fit the built-in model on fake rows, score it on real rows.

    Classification reports F1 (binary F1 for binary tasks, with the second
    schema category as the positive class; macro F1 otherwise) and AUROC
    (one-vs-rest macro for multiclass). Regression reports R^2 and RMSE on
    the target standardized by the real test set's spread.
    """
    if schema.target is None or schema.task == "none":
        raise DataError("schema does not designate a target column and task")
    xf, yf, target_col = _features_and_target(fake_train, schema)
    xr, yr, _ = _features_and_target(real_test, schema)

    if schema.task == "regression":
        mu, sd = yf.mean(), yf.std()
        sd = sd if sd > 0 else 1.0
        w = fit_ridge(xf, (yf - mu) / sd, l2)
        pred = (np.concatenate([xr, np.ones((xr.shape[0], 1))], axis=1) @ w) * sd + mu
        ss_res = float(((yr - pred) ** 2).sum())
        ss_tot = float(((yr - yr.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
        scale = yr.std() if yr.std() > 0 else 1.0
        rmse = float(np.sqrt(((yr - pred) ** 2).mean())) / scale
        return {"task": "regression", "r2": r2, "rmse_std": rmse}

    n_classes = target_col.n_categories()
    if len(np.unique(yf)) < 2:
        warnings.warn("fake training target has a single class; fit is degenerate")
    w = fit_logistic(xf, yf, n_classes, l2)
    proba = predict_proba(w, xr)
    pred = proba.argmax(axis=1)
    out = {"task": schema.task, "macro_f1": macro_f1(yr, pred, n_classes)}
    if schema.task == "binary":
        out["binary_f1"] = f1_score(yr, pred, positive=1)
        out["auroc"] = auroc(proba[:, 1], (yr == 1).astype(int))
    else:
        present = [c for c in range(n_classes) if np.any(yr == c)]
        out["auroc"] = float(np.mean(
            [auroc(proba[:, c], (yr == c).astype(int)) for c in present]
        ))
    return out


# ---------------------------------------------------------------------------
# column distribution diagnostics

def histogram_report(real_vals, fake_vals, kind: str, bins: int = 20) -> dict:
    """Total-variation distance between the real and fake marginal of one
    column, plus the binned counts behind it.

    Continuous columns use equal-width bins over the real range; fake mass
    outside that range lands in two overflow bins so disjoint supports give
    TV = 1. Discrete columns compare per-category frequencies.
    """
    if kind == CONTINUOUS:
        real = np.asarray(real_vals, dtype=np.float64)
        fake = np.asarray(fake_vals, dtype=np.float64)
        lo, hi = float(real.min()), float(real.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        rc, _ = np.histogram(real, bins=edges)
        inside = (fake >= lo) & (fake <= hi)
        fc, _ = np.histogram(fake[inside], bins=edges)
        below = int((fake < lo).sum())
        above = int((fake > hi).sum())
        p = rc / real.size
        q = fc / fake.size
        tv = 0.5 * (np.abs(p - q).sum() + below / fake.size + above / fake.size)
        return {
            "kind": kind,
            "tv": float(tv),
            "edges": edges.tolist(),
            "real_counts": rc.tolist(),
            "fake_counts": fc.tolist(),
            "fake_below": below,
            "fake_above": above,
        }
    cats = sorted(set(map(str, real_vals)) | set(map(str, fake_vals)))
    rc = np.asarray([sum(1 for v in real_vals if str(v) == c) for c in cats], dtype=float)
    fc = np.asarray([sum(1 for v in fake_vals if str(v) == c) for c in cats], dtype=float)
    tv = 0.5 * np.abs(rc / rc.sum() - fc / fc.sum()).sum()
    return {
        "kind": kind,
        "tv": float(tv),
        "categories": cats,
        "real_counts": rc.astype(int).tolist(),
        "fake_counts": fc.astype(int).tolist(),
    }


def write_histogram_csv(real: Table, fake: Table, schema: TableSchema,
                        path: str) -> None:
    """Binned real/fake counts for every column, one long-format CSV row per
    bin or category, for plotting outside this package."""
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", "kind", "bin", "real_count", "fake_count"])
        for col in schema.columns:
            rep = histogram_report(real.column(col.name), fake.column(col.name),
                                   col.kind)
            if col.kind == CONTINUOUS:
                edges = rep["edges"]
                for i, (rc, fc) in enumerate(zip(rep["real_counts"],
                                                 rep["fake_counts"])):
                    label = f"[{edges[i]:.6g},{edges[i + 1]:.6g})"
                    writer.writerow([col.name, col.kind, label, rc, fc])
                if rep["fake_below"] or rep["fake_above"]:
                    writer.writerow([col.name, col.kind, "below_range", 0,
                                     rep["fake_below"]])
                    writer.writerow([col.name, col.kind, "above_range", 0,
                                     rep["fake_above"]])
            else:
                for cat_name, rc, fc in zip(rep["categories"],
                                            rep["real_counts"],
                                            rep["fake_counts"]):
                    writer.writerow([col.name, col.kind, cat_name, rc, fc])


@dataclass
class EvalReport:
    coverage: float
    coverage_fake_direction: float
    task_metrics: dict = field(default_factory=dict)
    column_tv: dict = field(default_factory=dict)
    sample_seconds: float | None = None

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "coverage_fake_direction": self.coverage_fake_direction,
            "task_metrics": self.task_metrics,
            "column_tv": self.column_tv,
            "sample_seconds": self.sample_seconds,
        }


def evaluate(real: Table, fake: Table, schema: TableSchema, k: int = 5,
             sample_seconds: float | None = None) -> EvalReport:
    """Full report: both coverage directions, downstream metrics when the
    schema names a target, and per-column TV distances."""
    real_x = metric_space(real, schema)
    fake_x = metric_space(fake, schema)
    cov_real = coverage(fake_x, real_x, k=k, direction="real")
    cov_fake = coverage(fake_x, real_x, k=k, direction="fake")
    metrics = {}
    if schema.target is not None and schema.task != "none":
        metrics = tstr(fake, real, schema)
    col_tv = {
        c.name: histogram_report(real.column(c.name), fake.column(c.name), c.kind)["tv"]
        for c in schema.columns
    }
    return EvalReport(cov_real, cov_fake, metrics, col_tv, sample_seconds)
