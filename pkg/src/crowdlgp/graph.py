"""Similarity graph, graph Laplacian and the projected quadratic prior A = X^T L X."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform


class GraphError(ValueError):
    pass


def _sq_distances(X: np.ndarray) -> np.ndarray:
    return squareform(pdist(np.asarray(X, dtype=float), "sqeuclidean"))


def gaussian_weights(X, h: float, knn: Optional[int] = None) -> np.ndarray:
    """Gaussian similarity ``exp(-||x_i - x_j||^2 / h^2)`` with a zero diagonal.

    With ``knn`` only edges where j is among the ``knn`` nearest neighbours of
    i (or vice versa) are kept.
    """
    if not h > 0:
        raise GraphError(f"bandwidth must be positive, got {h}")
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    sq = _sq_distances(X)
    W = np.exp(-sq / (h * h))
    np.fill_diagonal(W, 0.0)
    if knn is not None:
        if not 1 <= knn < n:
            raise GraphError(f"knn must satisfy 1 <= knn < N={n}, got {knn}")
        d = sq.copy()
        np.fill_diagonal(d, np.inf)
        # stable sort so ties resolve by index, deterministically
        nbrs = np.argsort(d, axis=1, kind="stable")[:, :knn]
        keep = np.zeros((n, n), dtype=bool)
        keep[np.repeat(np.arange(n), knn), nbrs.ravel()] = True
        W = np.where(keep, W, 0.0)
        W = np.maximum(W, W.T)
    return W


def median_bandwidth(X) -> float:
    """Median of pairwise Euclidean distances between distinct rows."""
    X = np.asarray(X, dtype=float)
    uniq = np.unique(X, axis=0)
    if uniq.shape[0] < 2:
        raise GraphError("median bandwidth needs at least two distinct rows")
    dists = pdist(X)
    dists = dists[dists > 0]
    return float(np.median(dists))


def laplacian(W) -> np.ndarray:
    """Unnormalized Laplacian ``diag(W 1) - W``."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GraphError("weight matrix must be square")
    if np.any(W < 0):
        raise GraphError("weight matrix has negative entries")
    if not np.array_equal(W, W.T):
        raise GraphError("weight matrix is not symmetric")
    L = -W.copy()
    np.fill_diagonal(L, 0.0)
    L[np.diag_indices_from(L)] = -L.sum(axis=1)
    return L


def prior_matrix(X, L) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    L = np.asarray(L, dtype=float)
    if L.shape != (X.shape[0], X.shape[0]):
        raise GraphError(f"Laplacian shape {L.shape} does not match N={X.shape[0]}")
    A = X.T @ L @ X
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class GraphPrior:
    """Graph built over training points and the penalty it induces on xi.

    The logistic model is penalized by ``eta * xi^T A xi`` where ``eta`` is
    the effective coefficient (see :func:`build_graph_prior`).  ``lam``
    belongs to the direct Laplacian prior on the labels and is kept for
    reference only.
    """

    weights: np.ndarray
    laplacian: np.ndarray
    prior_matrix: np.ndarray
    bandwidth: float
    eta: float = 1.0
    lam: float = 1.0

    def penalty(self, xi: np.ndarray) -> float:
        return float(self.eta * xi @ self.prior_matrix @ xi)

    def penalty_grad(self, xi: np.ndarray) -> np.ndarray:
        return 2.0 * self.eta * (self.prior_matrix @ xi)

    def dump(self, directory) -> None:
        """Write weights and prior matrix as CSV for inspection."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "weights.csv", self.weights, delimiter=",", fmt="%.17g")
        np.savetxt(directory / "prior_matrix.csv", self.prior_matrix, delimiter=",", fmt="%.17g")


ETA_SCALES = ("edge-weight", "none")


def build_graph_prior(X, eta: float = 1.0, bandwidth: Optional[float] = None,
                      knn: Optional[int] = None, lam: float = 1.0,
                      eta_scale: str = "edge-weight") -> GraphPrior:
    """Gaussian graph over the rows of ``X`` and the matching xi prior.

    ``xi^T A xi`` sums weighted squared logit differences over all edges, so
    it grows with the number of edges.  With ``eta_scale="edge-weight"`` the
    coefficient stored on the prior is ``eta / sum_{i<j} w_ij``, which makes
    ``eta`` comparable across graph sizes and bandwidths; ``"none"`` stores
    ``eta`` unchanged.  The bandwidth defaults to the median pairwise distance.
    """
    if not eta >= 0:
        raise GraphError(f"eta must be non-negative, got {eta}")
    if eta_scale not in ETA_SCALES:
        raise GraphError(f"eta_scale must be one of {ETA_SCALES}, got {eta_scale!r}")
    X = np.asarray(X, dtype=float)
    h = median_bandwidth(X) if bandwidth is None else float(bandwidth)
    W = gaussian_weights(X, h, knn)
    L = laplacian(W)
    coef = eta
    if eta_scale == "edge-weight":
        total = 0.5 * float(W.sum())
        if total <= 0:
            raise GraphError("graph has no edges with positive weight")
        coef = eta / total
    return GraphPrior(W, L, prior_matrix(X, L), h, coef, lam)
