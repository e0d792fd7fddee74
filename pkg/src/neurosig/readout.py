"""Linear trait readout on signature vectors, plus rank-based ROC AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

LAMBDA_GRID = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class LinearReadout:
    """``y = G.T @ ((e - feature_means) / feature_stds) + b``."""

    G: np.ndarray
    b: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    ridge_lambda: np.ndarray
    target_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "G": self.G.tolist(),
            "b": self.b.tolist(),
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "ridge_lambda": self.ridge_lambda.tolist(),
            "target_names": list(self.target_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearReadout":
        return cls(
            np.asarray(d["G"], dtype=np.float64).reshape(len(d["feature_means"]), len(d["b"])),
            np.asarray(d["b"], dtype=np.float64),
            np.asarray(d["feature_means"], dtype=np.float64),
            np.asarray(d["feature_stds"], dtype=np.float64),
            np.asarray(d["ridge_lambda"], dtype=np.float64),
            list(d.get("target_names", [])),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "LinearReadout":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _ridge_solve(Xc, yc, lam):
    A = Xc.T @ Xc
    rhs = Xc.T @ yc
    if lam > 0:
        return np.linalg.solve(A + lam * np.eye(A.shape[0]), rhs)
    # ordinary least squares: normal equations unless rank deficient
    if np.linalg.matrix_rank(A) < A.shape[0]:
        return np.linalg.pinv(A) @ rhs
    return np.linalg.solve(A, rhs)


def fit_readout(features, targets, ridge_lambda=1e-2, target_names=None) -> LinearReadout:
    """Closed-form ridge on z-scored features with an unpenalized bias.

    ``ridge_lambda`` is a scalar or one value per target column.
    Zero-variance features keep std 1, so they stay at zero after centring.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    Y = Y.reshape(len(Y), -1)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} feature rows but {Y.shape[0]} target rows")
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    lams = np.broadcast_to(np.asarray(ridge_lambda, dtype=np.float64), (Y.shape[1],)).copy()
    if (lams < 0).any():
        raise ValueError("ridge_lambda must be >= 0")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xc = (X - mu) / sd
    b = Y.mean(axis=0)
    Yc = Y - b
    G = np.empty((X.shape[1], Y.shape[1]))
    for lam in np.unique(lams):
        cols = np.flatnonzero(lams == lam)
        G[:, cols] = _ridge_solve(Xc, Yc[:, cols], lam)
    names = list(target_names) if target_names is not None else []
    return LinearReadout(G, b, mu, sd, lams, names)


def predict(readout: LinearReadout, e) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != readout.feature_means.size:
        raise ValueError(f"signature length {e.shape[-1]} != readout input length {readout.feature_means.size}")
    return ((e - readout.feature_means) / readout.feature_stds) @ readout.G + readout.b


def select_lambda(X_train, Y_train, X_val, Y_val, grid=LAMBDA_GRID, rule="one_se") -> np.ndarray:
    """Per-target ridge penalty chosen on the validation rows.

    ``rule="min"`` takes the lowest validation MSE.  ``rule="one_se"`` takes
    the largest penalty whose validation MSE is within one standard error of
    that minimum, which guards small validation folds against chasing noise.
    Ties favour larger penalties under both rules.
    """
    if rule not in ("min", "one_se"):
        raise ValueError(f"unknown lambda rule {rule!r}")
    Y_train = np.asarray(Y_train, dtype=np.float64).reshape(len(Y_train), -1)
    Y_val = np.asarray(Y_val, dtype=np.float64).reshape(len(Y_val), -1)
    grid = sorted(grid)
    sq = np.empty((len(grid), Y_val.shape[0], Y_train.shape[1]))
    for i, lam in enumerate(grid):
        r = fit_readout(X_train, Y_train, lam)
        sq[i] = (predict(r, X_val) - Y_val) ** 2
    scores = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / np.sqrt(sq.shape[1]) if sq.shape[1] > 1 else np.zeros_like(scores)
    best = np.empty(Y_train.shape[1])
    for j in range(Y_train.shape[1]):
        col = scores[:, j]
        i = int(np.argmin(col))
        slack = col[i] * 1e-12 + (se[i, j] if rule == "one_se" else 0.0)
        best[j] = grid[np.flatnonzero(col <= col[i] + slack)[-1]]
    return best


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
