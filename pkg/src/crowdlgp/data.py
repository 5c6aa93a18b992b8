"""Datasets, annotator label matrices, CSV I/O, scaling, folds and masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised on malformed input files or invalid dataset contents."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def round_half_up(x: float) -> int:
    """Round to nearest integer with halves going up (``round(2.5) == 3``)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    ground_truth: Optional[np.ndarray] = None
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be a non-empty N x D matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", _frozen(X))
        if self.ground_truth is not None:
            z = np.asarray(self.ground_truth)
            if z.shape != (X.shape[0],):
                raise DataError(f"ground_truth must have length {X.shape[0]}")
            if not np.all((z == 0) | (z == 1)):
                raise DataError("ground_truth entries must be 0 or 1")
            object.__setattr__(self, "ground_truth", _frozen(z.astype(np.int8)))
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != X.shape[1]:
                raise DataError("feature_names length does not match D")
            object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        z = None if self.ground_truth is None else self.ground_truth[idx]
        return Dataset(self.features[idx], z, self.feature_names)


@dataclass(frozen=True)
class LabelMatrix:
    """Sparse binary annotator labels stored as a dense value array plus mask.

    ``values[i, t]`` is only meaningful where ``observed[i, t]`` is True.
    Rows with no observed entry are unlabeled points (empty annotator set).
    """

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        m = np.asarray(self.observed, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise DataError("values and observed must be matching N x T arrays")
        if not np.all((v[m] == 0) | (v[m] == 1)):
            raise DataError("labels must be 0 or 1")
        v = np.where(m, v, 0).astype(np.int8)
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "observed", _frozen(m))

    @classmethod
    def from_triples(cls, triples, n_points: int, n_annotators: int) -> "LabelMatrix":
        values = np.zeros((n_points, n_annotators), dtype=np.int8)
        observed = np.zeros((n_points, n_annotators), dtype=bool)
        for i, t, y in triples:
            if not (0 <= i < n_points and 0 <= t < n_annotators):
                raise DataError(f"label index ({i}, {t}) out of range")
            if y not in (0, 1):
                raise DataError(f"label for ({i}, {t}) must be 0 or 1, got {y!r}")
            if observed[i, t]:
                raise DataError(f"duplicate label for ({i}, {t})")
            values[i, t] = y
            observed[i, t] = True
        return cls(values, observed)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def num_annotators(self) -> int:
        return self.values.shape[1]

    @property
    def labeled_points(self) -> np.ndarray:
        """Boolean mask of points with at least one annotator label."""
        return self.observed.any(axis=1)

    def annotators_of(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.observed[i])

    def triples(self) -> Iterator[tuple]:
        for i, t in zip(*np.nonzero(self.observed)):
            yield int(i), int(t), int(self.values[i, t])

    def subset(self, idx) -> "LabelMatrix":
        idx = np.asarray(idx)
        return LabelMatrix(self.values[idx], self.observed[idx])

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return (np.array_equal(self.observed, other.observed)
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class ScalingParams:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        std = np.asarray(self.std, dtype=float)
        if np.any(std <= 0):
            raise DataError("scaling standard deviations must be strictly positive")
        object.__setattr__(self, "mean", _frozen(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", _frozen(std))

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise DataError(f"expected {self.mean.shape[0]} features, got {X.shape[-1]}")
        return (X - self.mean) / self.std

    @classmethod
    def identity(cls, d: int) -> "ScalingParams":
        return cls(np.zeros(d), np.ones(d))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col}: non-finite value {cell!r}")
    return v


def load_csv(path, has_header: bool = False, label_column: Optional[int] = None) -> Dataset:
    """Load a comma-separated dataset.

    Row and column numbers in error messages are 1-based and count data rows
    only (the header, if any, is not row 1).  ``label_column`` is a 0-based
    column index; negative values count from the end.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if has_header and rows:
        header, rows = rows[0], rows[1:]
    if not rows:
        raise DataError(f"{path}: file contains no data rows")
    width = len(rows[0])
    if label_column is not None:
        if label_column < 0:
            label_column += width
        if not 0 <= label_column < width:
            raise DataError(f"label column {label_column} out of range for {width} columns")
        if width < 2:
            raise DataError("need at least one feature column besides the label")

    feats, labels = [], []
    for r, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DataError(f"row {r}: expected {width} columns, found {len(row)}")
        vals = []
        for c, cell in enumerate(row):
            if c == label_column:
                s = cell.strip()
                if s not in ("0", "1", "0.0", "1.0"):
                    raise DataError(f"row {r}, column {c + 1}: label must be 0 or 1, got {cell!r}")
                labels.append(int(float(s)))
            else:
                vals.append(_parse_float(cell, r, c + 1))
        feats.append(vals)

    names = None
    if header is not None:
        if len(header) != width:
            raise DataError(f"header has {len(header)} columns, data has {width}")
        names = tuple(h.strip() for i, h in enumerate(header) if i != label_column)
    z = np.array(labels, dtype=np.int8) if label_column is not None else None
    return Dataset(np.array(feats, dtype=float), z, names)


def write_csv(ds: Dataset, path, header: bool = True) -> None:
    """Write features (and ground truth as the last column, if present).

    Floats use ``repr``, the shortest string that round-trips exactly.
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            names = list(ds.feature_names or [f"x{j}" for j in range(ds.d)])
            if ds.ground_truth is not None:
                names.append("label")
            w.writerow(names)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.ground_truth is not None:
                row.append(str(int(ds.ground_truth[i])))
            w.writerow(row)


LABEL_HEADER = ["point", "annotator", "label"]


def load_labels_csv(path, n_points: Optional[int] = None,
                    n_annotators: Optional[int] = None) -> LabelMatrix:
    """Read a ``point,annotator,label`` CSV (0-based indices, absent = missing)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != LABEL_HEADER:
        raise DataError(f"{path}: expected header {','.join(LABEL_HEADER)}")
    triples = []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != 3:
            raise DataError(f"{path}: row {r}: expected 3 columns, found {len(row)}")
        try:
            i, t, y = (int(c) for c in row)
        except ValueError:
            raise DataError(f"{path}: row {r}: non-integer entry in {row}") from None
        triples.append((i, t, y))
    if n_points is None:
        n_points = 1 + max((i for i, _, _ in triples), default=-1)
    if n_annotators is None:
        n_annotators = 1 + max((t for _, t, _ in triples), default=-1)
    return LabelMatrix.from_triples(triples, n_points, n_annotators)


def write_labels_csv(labels: LabelMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for triple in labels.triples():
            w.writerow(triple)


# ---------------------------------------------------------------------------
# Preprocessing, folds, masking
# ---------------------------------------------------------------------------

def standardize(train: Dataset) -> tuple[Dataset, ScalingParams]:
    """Center and scale columns with the population standard deviation.

    Zero-variance columns keep std 1 and therefore map to all zeros.
    """
    X = train.features
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    params = ScalingParams(mean, std)
    return Dataset(params.transform(X), train.ground_truth, train.feature_names), params


def stratified_kfold(ds: Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split into ``k`` folds preserving class proportions.

    Each class is shuffled and dealt round-robin over the folds.  The starting
    fold for each class continues where the previous class stopped so total
    fold sizes differ by at most one.
    """
    if ds.ground_truth is None:
        raise DataError("stratified_kfold requires ground truth")
    if k < 2:
        raise DataError("k must be at least 2")
    z = ds.ground_truth
    rng = np.random.default_rng(seed)
    fold_of = np.empty(ds.n, dtype=int)
    offset = 0
    for c in (0, 1):
        members = np.flatnonzero(z == c)
        if 0 < len(members) < k:
            raise DataError(f"class {c} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        fold_of[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    all_idx = np.arange(ds.n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def _allocate(counts: Sequence[int], total: int) -> list[int]:
    """Largest-remainder split of ``total`` proportionally to ``counts``."""
    n = sum(counts)
    exact = [total * c / n for c in counts]
    alloc = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(counts)), key=lambda j: (-(exact[j] - alloc[j]), j))
    for j in order[: total - sum(alloc)]:
        alloc[j] += 1
    return alloc


def mask_labels(labels: LabelMatrix, proportion: float, seed: int,
                strata: Optional[np.ndarray] = None) -> LabelMatrix:
    """Keep all labels on ``round(proportion * N)`` points and drop the rest.

    The retained points are drawn per stratum (ground truth, or the majority
    vote when ``strata`` is None) in proportion to the stratum sizes.
    """
    if not 0.0 < proportion <= 1.0:
        raise DataError(f"proportion must be in (0, 1], got {proportion}")
    if proportion == 1.0:
        return labels
    n = labels.n
    if strata is None:
        ones = (labels.values * labels.observed).sum(axis=1)
        strata = (2 * ones >= labels.observed.sum(axis=1)).astype(int)
    strata = np.asarray(strata)
    keep_total = round_half_up(proportion * n)
    groups = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    alloc = _allocate([len(g) for g in groups], keep_total)
    rng = np.random.default_rng(seed)
    keep = np.zeros(n, dtype=bool)
    for g, a in zip(groups, alloc):
        keep[rng.choice(g, size=a, replace=False)] = True
    observed = labels.observed & keep[:, None]
    return LabelMatrix(labels.values, observed)
