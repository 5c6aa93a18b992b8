"""Input-dependent annotator noise.

Each annotator t reports a label that is Gaussian around the true label with
standard deviation ``sigma_t(x) = logistic(w_t . x + gamma_t)``.  Small sigma
in a region of input space means the annotator is reliable there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

SIGMA_MIN = 1e-3
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class AnnotatorParams:
    w: np.ndarray
    gamma: float

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if not (np.all(np.isfinite(w)) and math.isfinite(self.gamma)):
            raise ValueError("annotator parameters must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "gamma", float(self.gamma))


def sigma(p: AnnotatorParams, x, sigma_min: float = SIGMA_MIN) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != p.w.shape:
        raise ValueError(f"x has shape {x.shape}, expected {p.w.shape}")
    return max(float(expit(p.w @ x + p.gamma)), sigma_min)


def label_loglik(y: int, z: int, sigma: float) -> float:
    """Gaussian log density of label ``y`` around ``z`` with std ``sigma``."""
    return -math.log(sigma) - LOG_SQRT_2PI - (y - z) ** 2 / (2.0 * sigma * sigma)


def sigma_grad_terms(p: AnnotatorParams, x, y: int, z: int,
                     sigma_min: float = SIGMA_MIN) -> tuple[np.ndarray, float]:
    """Gradient of ``label_loglik(y, z, sigma(p, x))`` w.r.t. ``(w, gamma)``.

    Equals ``[(y - z)^2 / s^2 - 1] (1 - s)`` times ``(x, 1)``; zero when the
    clamp at ``sigma_min`` is active.
    """
    x = np.asarray(x, dtype=float)
    raw = float(expit(p.w @ x + p.gamma))
    if raw < sigma_min:
        return np.zeros_like(x), 0.0
    factor = ((y - z) ** 2 / raw**2 - 1.0) * (1.0 - raw)
    return factor * x, factor


# ---------------------------------------------------------------------------
# Vectorized forms over all (point, annotator) pairs
# ---------------------------------------------------------------------------

def stack(params: list[AnnotatorParams]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W, gamma)`` with W of shape (T, D)."""
    W = np.array([p.w for p in params], dtype=float)
    g = np.array([p.gamma for p in params], dtype=float)
    return W, g


def unstack(W: np.ndarray, gamma: np.ndarray) -> list[AnnotatorParams]:
    return [AnnotatorParams(W[t], gamma[t]) for t in range(W.shape[0])]


def sigma_matrix(X: np.ndarray, W: np.ndarray, gamma: np.ndarray,
                 sigma_min: float = SIGMA_MIN) -> tuple[np.ndarray, np.ndarray]:
    """Clamped N x T noise scales and the mask of unclamped entries."""
    raw = expit(X @ W.T + gamma)
    active = raw >= sigma_min
    return np.where(active, raw, sigma_min), active


def loglik_table(values: np.ndarray, observed: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Summed label log-likelihood per point for each candidate truth.

    Returns an N x 2 array whose column z is ``sum_t log N(y_it; z, S_it)``
    over the observed annotators of each point.
    """
    base = -np.log(S) - LOG_SQRT_2PI
    inv2 = 1.0 / (2.0 * S * S)
    out = np.empty((S.shape[0], 2))
    for z in (0, 1):
        term = base - (values - z) ** 2 * inv2
        out[:, z] = np.where(observed, term, 0.0).sum(axis=1)
    return out
