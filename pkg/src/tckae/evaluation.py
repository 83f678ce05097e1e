"""
Classification and projection harness: kNN on codes or on a precomputed
similarity, F1, ROC AUC, reconstruction MSE, PCA and kernel PCA.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import reconstruction_loss
from .mts import atomic_write_text

__all__ = [
    "knn_classify",
    "f1_score",
    "auc_roc",
    "mse",
    "Projection2D",
    "pca_project",
    "kernel_pca_project",
    "EvalReport",
    "TABLE_COLUMNS",
    "write_table",
]

TABLE_COLUMNS = ("method", "mse", "mse_std", "f1", "f1_std", "auc", "auc_std")


def _neighbors(train_repr, test_repr, k, metric):
    if metric == "euclidean":
        A = np.asarray(train_repr, dtype=np.float64)
        B = np.asarray(test_repr, dtype=np.float64)
        # direct differences: exact ties stay exact ties
        d = ((B[:, None, :] - A[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(d, axis=1, kind="stable")
    elif metric == "precomputed":
        S = np.asarray(test_repr, dtype=np.float64)
        if S.shape[1] != len(train_repr):
            raise ValueError(
                f"similarity matrix has {S.shape[1]} columns for {len(train_repr)} train samples")
        order = np.argsort(-S, axis=1, kind="stable")
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return order[:, :k]


def knn_classify(train_repr, train_labels, test_repr, k=3, metric="euclidean"):
    """k-nearest-neighbour prediction and positive-class score.

    ``metric="euclidean"``: ``train_repr``/``test_repr`` are feature rows.
    ``metric="precomputed"``: ``test_repr`` is a test x train similarity
    matrix (larger = closer); ``train_repr`` is only used for its length.

    Distance ties go to the lower train index. The score is the fraction of
    positive labels among the k neighbours; an even vote is settled by the
    label of the nearest neighbour.
    """
    y = np.asarray(train_labels).astype(np.int64)
    if not 1 <= k <= len(y):
        raise ValueError(f"k={k} must lie in [1, {len(y)}]")
    nn = _neighbors(train_repr, test_repr, k, metric)
    votes = y[nn]
    positives = votes.sum(axis=1)
    score = positives / k
    pred = (2 * positives > k).astype(np.int64)
    tied = 2 * positives == k
    pred[tied] = votes[tied, 0]
    return pred, score


def f1_score(y_true, y_pred, positive_label=1):
    y_true = np.asarray(y_true) == positive_label
    y_pred = np.asarray(y_pred) == positive_label
    if y_true.shape != y_pred.shape:
        raise ValueError("label vectors differ in length")
    tp = np.sum(y_true & y_pred)
    fp = np.sum(~y_true & y_pred)
    fn = np.sum(y_true & ~y_pred)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def auc_roc(y_true, scores):
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties 1/2."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    # average ranks handle ties
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mse(X, X_rec):
    return reconstruction_loss(X, X_rec)


# --------------------------------------------------------------------------
# Projections
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Projection2D:
    coordinates: np.ndarray
    explained_variance: np.ndarray

    def __post_init__(self):
        ev = self.explained_variance
        if np.any(ev < 0) or np.any(np.diff(ev) > 1e-12 * max(1.0, float(ev[0]) if len(ev) else 1.0)):
            raise ValueError("explained variances must be non-negative and non-increasing")


def _fix_signs(vectors):
    """Flip columns so each one's largest-magnitude entry is positive."""
    pivot = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivot, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def pca_project(X, dims=2):
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if dims > min(n - 1, d):
        raise ValueError(f"dims={dims} exceeds min(N-1, d) = {min(n - 1, d)}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    top = np.argsort(evals, kind="stable")[::-1][:dims]
    comps = _fix_signs(evecs[:, top])
    return Projection2D(Xc @ comps, np.maximum(evals[top], 0.0))


def kernel_pca_project(K, dims=2):
    """Double-centre K, keep the top eigenpairs, scale vectors by sqrt(eigenvalue)."""
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValueError("kernel PCA needs a square kernel")
    if np.max(np.abs(K - K.T), initial=0.0) > 1e-9:
        raise ValueError("kernel matrix is not symmetric")
    if dims > n - 1:
        raise ValueError(f"dims={dims} exceeds N-1 = {n - 1}")
    row = K.mean(axis=0)
    Kc = K - row[None, :] - row[:, None] + K.mean()
    Kc = 0.5 * (Kc + Kc.T)
    evals, evecs = np.linalg.eigh(Kc)
    top = np.argsort(evals, kind="stable")[::-1][:dims]
    lam = np.maximum(evals[top], 0.0)
    vecs = _fix_signs(evecs[:, top])
    return Projection2D(vecs * np.sqrt(lam), lam / (n - 1))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def _mean_std(values):
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class EvalReport:
    method: str
    f1_runs: list[float] = field(default_factory=list)
    auc_runs: list[float] = field(default_factory=list)
    mse_runs: list[float] = field(default_factory=list)  # empty when not applicable

    def add(self, f1, auc, mse_value=None):
        self.f1_runs.append(float(f1))
        self.auc_runs.append(float(auc))
        if mse_value is not None:
            self.mse_runs.append(float(mse_value))

    @property
    def f1(self):
        return _mean_std(self.f1_runs)

    @property
    def auc(self):
        return _mean_std(self.auc_runs)

    @property
    def mse(self):
        return _mean_std(self.mse_runs)

    def to_dict(self):
        (f1, f1s), (auc, aucs), (m, ms) = self.f1, self.auc, self.mse
        return {
            "method": self.method,
            "mse": m, "mse_std": ms,
            "f1": f1, "f1_std": f1s,
            "auc": auc, "auc_std": aucs,
            "runs": {"f1": self.f1_runs, "auc": self.auc_runs, "mse": self.mse_runs},
        }

    @classmethod
    def from_dict(cls, d):
        runs = d["runs"]
        return cls(d["method"], list(runs["f1"]), list(runs["auc"]), list(runs["mse"]))

    def table_row(self):
        (f1, f1s), (auc, aucs), (m, ms) = self.f1, self.auc, self.mse

        def fmt(x):
            return "" if x is None else f"{x:.6f}"

        return ",".join([self.method, fmt(m), fmt(ms), fmt(f1), fmt(f1s), fmt(auc), fmt(aucs)])


def write_table(reports, path):
    lines = [",".join(TABLE_COLUMNS)] + [r.table_row() for r in reports]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_reports_json(reports, path):
    atomic_write_text(path, json.dumps([r.to_dict() for r in reports], indent=2) + "\n")


def read_reports_json(path):
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)]
