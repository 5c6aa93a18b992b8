"""Simulated annotators: one k-means cluster of expertise per annotator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, DataError, LabelMatrix, round_half_up


@dataclass(frozen=True)
class SimConfig:
    num_labelers: int = 5
    error_rate: float = 0.35
    seed: int = 0
    kmeans_restarts: int = 10

    def __post_init__(self):
        if self.num_labelers < 1:
            raise ValueError("num_labelers must be positive")
        if not 0.0 <= self.error_rate < 1.0:
            raise ValueError("error_rate must lie in [0, 1)")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be positive")


def _sq_dist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = _sq_dist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centers; fall back to uniform
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dist(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter=300):
    k = C.shape[0]
    assign = None
    for _ in range(max_iter):
        D = _sq_dist(X, C)
        new = np.argmin(D, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the farthest point of a cluster that can spare one
            own = D[np.arange(len(X)), new]
            own[counts[new] < 2] = -1.0
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            counts[j] += 1
            new[far] = j
            C[j] = X[far]
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            C[j] = X[assign == j].mean(axis=0)
    D = _sq_dist(X, C)
    assign = np.argmin(D, axis=1)
    inertia = float(np.sum((X - C[assign]) ** 2))
    return assign, C, inertia


def kmeans(X, k: int, seed: int = 0, restarts: int = 10):
    """Lloyd's k-means with k-means++ seeding; best of ``restarts`` by inertia.

    Returns ``(assignments, centroids, inertia)`` with 0-based cluster ids.
    Ties in inertia go to the earliest restart.
    """
    X = np.asarray(X, dtype=float)
    distinct = np.unique(X, axis=0).shape[0]
    if not 1 <= k <= distinct:
        raise DataError(f"k={k} must be between 1 and the number of distinct rows ({distinct})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        C = _kmeanspp(X, k, rng)
        result = _lloyd(X, C.copy())
        if best is None or result[2] < best[2]:
            best = result
    return best


def simulate_labelers(ds: Dataset, cfg: SimConfig = SimConfig()):
    """Simulate ``cfg.num_labelers`` annotators over k-means clusters.

    Annotator t copies the ground truth on cluster t.  Off its cluster it
    flips exactly ``round(error_rate * m_t)`` labels chosen uniformly among
    the ``m_t`` off-cluster points.  Everyone labels every point.

    Returns ``(LabelMatrix, assignments)``.
    """
    if ds.ground_truth is None:
        raise DataError("labeler simulation requires ground truth")
    k = cfg.num_labelers
    rng = np.random.default_rng(cfg.seed)
    km_seed = int(rng.integers(2**31))
    assign, _, _ = kmeans(ds.features, k, km_seed, cfg.kmeans_restarts)
    z = ds.ground_truth.astype(np.int8)
    values = np.tile(z[:, None], (1, k))
    for t in range(k):
        off = np.flatnonzero(assign != t)
        n_flip = round_half_up(cfg.error_rate * len(off))
        flip = rng.choice(off, size=n_flip, replace=False)
        values[flip, t] = 1 - values[flip, t]
    return LabelMatrix(values, np.ones_like(values, dtype=bool)), assign


def flip_counts(labels: LabelMatrix, truth, assign) -> list[tuple[int, int, int]]:
    """Per annotator ``(off-cluster points, off-cluster flips, on-cluster flips)``."""
    truth = np.asarray(truth)
    out = []
    for t in range(labels.num_annotators):
        wrong = labels.observed[:, t] & (labels.values[:, t] != truth)
        off = np.asarray(assign) != t
        out.append((int(off.sum()), int((wrong & off).sum()), int((wrong & ~off).sum())))
    return out


def write_assignments_csv(assign, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "cluster"])
        for i, c in enumerate(assign):
            w.writerow([i, int(c)])
