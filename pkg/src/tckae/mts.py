"""
Multivariate time series (MTS) with missing values: data model, file formats,
imputation, standardization, flattening and splitting.

Values live in an ``N x T x V`` float array; a boolean mask of the same shape
marks observed cells. Arithmetic is always mask-driven: whatever sits in an
unobserved cell (``NaN`` straight from a file, or an imputed number) never
leaks into statistics.
"""

from __future__ import annotations

import enum
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

__all__ = [
    "TimeSeriesDataset",
    "Imputation",
    "ImputationMethod",
    "Standardization",
    "load_dataset",
    "save_dataset",
    "impute",
    "standardize",
    "flatten",
    "unflatten",
    "split_train_test",
    "drop_sparse",
    "read_matrix",
    "write_matrix",
    "atomic_write_text",
]


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    values: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None
    variable_names: list[str] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask).astype(bool)
        if values.ndim != 3:
            raise DataFormatError(f"values must be N x T x V, got shape {values.shape}")
        if mask.shape != values.shape:
            raise DataFormatError(
                f"mask shape {mask.shape} differs from values shape {values.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise DataFormatError("observed cells must hold finite values")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (values.shape[0],):
                raise DataFormatError(
                    f"expected {values.shape[0]} labels, got shape {labels.shape}")
            if not np.all((labels == 0) | (labels == 1)):
                raise DataFormatError("labels must be in {0, 1}")
            object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

        if self.variable_names is not None:
            names = list(self.variable_names)
            if len(names) != values.shape[2]:
                raise DataFormatError(
                    f"{len(names)} variable names for {values.shape[2]} variables")
            object.__setattr__(self, "variable_names", names)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    @property
    def n_vars(self):
        return self.values.shape[2]

    def __len__(self):
        return self.values.shape[0]

    def subset(self, index):
        """Return the samples selected by ``index`` (slice, int array or bool array)."""
        labels = None if self.labels is None else self.labels[index]
        return TimeSeriesDataset(self.values[index], self.mask[index], labels,
                                 self.variable_names)

    def with_values(self, values):
        return TimeSeriesDataset(values, self.mask, self.labels, self.variable_names)

    def masked_values(self):
        """Values with every unobserved cell set to 0.0 (safe for arithmetic)."""
        return np.where(self.mask, self.values, 0.0)


def concat(a, b):
    if (a.labels is None) != (b.labels is None):
        raise DataFormatError("cannot concatenate labelled and unlabelled datasets")
    labels = None if a.labels is None else np.concatenate([a.labels, b.labels])
    return TimeSeriesDataset(np.concatenate([a.values, b.values]),
                             np.concatenate([a.mask, b.mask]), labels, a.variable_names)


def drop_sparse(ds, min_observed=2):
    """Drop MTS with fewer than ``min_observed`` observed cells."""
    keep = ds.mask.reshape(len(ds), -1).sum(axis=1) >= min_observed
    return ds.subset(keep)


# --------------------------------------------------------------------------
# Imputation
# --------------------------------------------------------------------------

class Imputation(enum.Enum):
    ZERO = "zero"
    MEAN = "mean"
    LOCF = "locf"


@dataclass(frozen=True, eq=False)
class ImputationMethod:
    tag: Imputation
    means: np.ndarray | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "tag", Imputation(self.tag))
        if self.means is not None:
            means = np.asarray(self.means, dtype=np.float64)
            if means.ndim != 1 or not np.all(np.isfinite(means)):
                raise ValueError("imputation means must be a finite 1-D vector")
            object.__setattr__(self, "means", _frozen(means))

    @classmethod
    def zero(cls):
        return cls(Imputation.ZERO)

    @classmethod
    def locf(cls):
        return cls(Imputation.LOCF)

    @classmethod
    def mean_from(cls, train):
        """Per-variable means over the observed cells of ``train``."""
        counts = train.mask.sum(axis=(0, 1))
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise DataFormatError(f"variables {missing} have no observed training cells")
        sums = train.masked_values().sum(axis=(0, 1))
        return cls(Imputation.MEAN, sums / counts)

    @classmethod
    def from_name(cls, name, train=None):
        tag = Imputation(name)
        if tag is Imputation.MEAN:
            if train is None:
                raise ValueError("mean imputation needs training data for its statistics")
            return cls.mean_from(train)
        return cls(tag)


def _locf(values, mask):
    out = np.where(mask, values, 0.0)
    # forward pass along time; positions before the first observation keep 0
    for t in range(1, out.shape[1]):
        carry = ~mask[:, t, :]
        out[:, t, :] = np.where(carry, out[:, t - 1, :], out[:, t, :])
    return out


def impute(ds, method):
    """Fill unobserved cells; observed cells and the mask are left untouched."""
    tag = method.tag
    if tag is Imputation.ZERO:
        filled = ds.masked_values()
    elif tag is Imputation.MEAN:
        if method.means is None:
            raise ValueError("mean imputation requested without statistics")
        if method.means.shape != (ds.n_vars,):
            raise ValueError(
                f"mean statistics cover {method.means.shape[0]} variables, dataset has {ds.n_vars}")
        filled = np.where(ds.mask, ds.values, method.means[None, None, :])
    elif tag is Imputation.LOCF:
        filled = _locf(ds.values, ds.mask)
    else:  # pragma: no cover
        raise ValueError(f"unknown imputation {tag!r}")
    return ds.with_values(filled)


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds):
        scaled = (ds.values - self.mean) / self.std
        return ds.with_values(np.where(ds.mask, scaled, ds.values))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


def fit_standardization(train):
    counts = train.mask.sum(axis=(0, 1))
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataFormatError(f"variables {missing} have no observed training cells")
    x = train.masked_values()
    mean = x.sum(axis=(0, 1)) / counts
    dev = np.where(train.mask, train.values - mean, 0.0)
    std = np.sqrt((dev ** 2).sum(axis=(0, 1)) / counts)
    # constant variables: keep them centred, avoid dividing by zero
    std = np.where(std > 0, std, 1.0)
    return Standardization(mean, std)


def standardize(train, apply_to):
    """z-score ``apply_to`` with per-variable statistics from observed ``train`` cells.

    Returns ``(standardized dataset, Standardization)``.
    """
    stats = fit_standardization(train)
    return stats.apply(apply_to), stats


# --------------------------------------------------------------------------
# Flattening and splitting
# --------------------------------------------------------------------------

def flatten(ds):
    """N x T x V -> N x (T*V), time-major (column ``t*V + v``)."""
    values = ds.values if isinstance(ds, TimeSeriesDataset) else np.asarray(ds)
    if not np.all(np.isfinite(values)):
        raise DataFormatError("cannot flatten a dataset with unfilled (non-finite) cells")
    return np.ascontiguousarray(values.reshape(values.shape[0], -1))


def unflatten(X, n_steps, n_vars):
    X = np.asarray(X)
    return X.reshape(X.shape[0], n_steps, n_vars)


def split_train_test(ds, train_fraction=0.8):
    """Ordered split: the first ``floor(N * fraction)`` samples train, the rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(len(ds) * train_fraction)
    if n_train == 0 or n_train == len(ds):
        raise ValueError(
            f"split of {len(ds)} samples at fraction {train_fraction} leaves an empty side")
    return ds.subset(slice(0, n_train)), ds.subset(slice(n_train, None))


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

def _fmt(x):
    x = float(x)
    return "NaN" if math.isnan(x) else repr(x)


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_text(ds):
    n, t, v = ds.shape
    lines = [f"{n},{t},{v},{int(ds.labels is not None)}"]
    vals = np.where(ds.mask, ds.values, np.nan)
    for i in range(n):
        for step in range(t):
            lines.append(",".join(_fmt(x) for x in vals[i, step]))
    if ds.labels is not None:
        lines.append(",".join(str(int(y)) for y in ds.labels))
    return "\n".join(lines) + "\n"


def save_dataset(ds, path):
    """Write the dataset CSV format; unobserved cells are written as ``NaN``."""
    atomic_write_text(path, dataset_to_text(ds))


def _parse_row(line, width, lineno):
    parts = line.split(",")
    if len(parts) != width:
        raise DataFormatError(f"line {lineno}: expected {width} fields, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise DataFormatError(f"line {lineno}: {exc}") from None


def load_dataset(path):
    """Read the dataset CSV format.

    Header ``N,T,V,has_labels``, then ``N*T`` lines of ``V`` values (``NaN`` for
    missing), then an optional line of ``N`` labels.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataFormatError(f"dataset file not found: {path}") from None
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    if not lines:
        raise DataFormatError(f"{path}: empty file")

    header = lines[0].split(",")
    try:
        n, t, v, has_labels = (int(h) for h in header)
    except ValueError:
        raise DataFormatError(f"{path}: malformed header {lines[0]!r}") from None
    if n < 1 or t < 1 or v < 1 or has_labels not in (0, 1):
        raise DataFormatError(f"{path}: invalid header values {lines[0]!r}")

    expected = 1 + n * t + has_labels
    if len(lines) != expected:
        raise DataFormatError(
            f"{path}: header declares N={n}, T={t} (expecting {expected} lines), found {len(lines)}")

    rows = [_parse_row(lines[1 + k], v, 2 + k) for k in range(n * t)]
    values = np.asarray(rows, dtype=np.float64).reshape(n, t, v)
    mask = ~np.isnan(values)
    if np.any(np.isinf(values)):
        raise DataFormatError(f"{path}: observed values must be finite")

    labels = None
    if has_labels:
        raw = _parse_row(lines[-1], n, len(lines))
        labels = np.asarray(raw)
        if not np.all((labels == 0) | (labels == 1)):
            raise DataFormatError(f"{path}: labels must be 0 or 1")
    return TimeSeriesDataset(values, mask, labels)


def matrix_to_text(M):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [f"{M.shape[0]},{M.shape[1]}"]
    lines.extend(",".join(_fmt(x) for x in row) for row in M)
    return "\n".join(lines) + "\n"


def write_matrix(M, path):
    """Write a matrix as CSV with a ``rows,cols`` header line."""
    atomic_write_text(path, matrix_to_text(M))


def read_matrix(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").strip().splitlines()
    except FileNotFoundError:
        raise DataFormatError(f"matrix file not found: {path}") from None
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    try:
        rows, cols = (int(h) for h in lines[0].split(","))
    except ValueError:
        raise DataFormatError(f"{path}: malformed header {lines[0]!r}") from None
    if len(lines) - 1 != rows:
        raise DataFormatError(f"{path}: header declares {rows} rows, found {len(lines) - 1}")
    data = [_parse_row(ln, cols, k + 2) for k, ln in enumerate(lines[1:])]
    M = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(M)):
        raise DataFormatError(f"{path}: matrix entries must be finite")
    return M
