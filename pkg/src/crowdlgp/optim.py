"""Limited-memory BFGS maximizer and a central-difference gradient oracle.

The maximizer works on the negated objective internally.  The line search
enforces the strong Wolfe conditions using safeguarded cubic interpolation
(Nocedal & Wright, Numerical Optimization, algorithms 3.5 and 3.6).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

CONVERGED = "converged"
STALLED = "stalled"
MAX_ITER = "max_iterations"
LS_FAILED = "line_search_failed"


@dataclass(frozen=True)
class OptimConfig:
    memory: int = 10
    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    sufficient_decrease: float = 1e-4
    curvature: float = 0.9
    # relative change in objective below which the run is declared stalled
    value_tolerance: float = 1e-13
    max_line_search: int = 30

    def __post_init__(self):
        if self.memory < 1 or self.max_iterations < 1:
            raise ValueError("memory and max_iterations must be positive")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.sufficient_decrease < self.curvature < 1:
            raise ValueError("need 0 < sufficient_decrease < curvature < 1")


@dataclass(frozen=True)
class OptimResult:
    x: np.ndarray
    value: float
    status: str
    iterations: int
    grad_norm: float

    @property
    def converged(self) -> bool:
        return self.status in (CONVERGED, STALLED)


class OptimError(RuntimeError):
    pass


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + s e_k) - f(x - s e_k)) / 2s`` per coordinate."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def two_loop_direction(grad: np.ndarray, s_hist, y_hist) -> np.ndarray:
    """Apply the L-BFGS inverse-Hessian approximation to ``grad``.

    The initial matrix is ``(s'y / y'y) I`` from the most recent pair.
    """
    q = np.array(grad, dtype=float)
    if not s_hist:
        return q
    rhos = [1.0 / (y @ s) for s, y in zip(s_hist, y_hist)]
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    r = q * ((s @ y) / (y @ y))
    for s, y, rho, a in zip(s_hist, y_hist, rhos, reversed(alphas)):
        b = rho * (y @ r)
        r += (a - b) * s
    return r


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimizer of the cubic through two points with derivatives, clipped to [lo, hi]."""
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc >= 0 and math.isfinite(disc):
        d2 = math.copysign(math.sqrt(disc), x2 - x1)
        denom = g2 - g1 + 2.0 * d2
        if denom != 0:
            t = x2 - (x2 - x1) * (g2 + d2 - d1) / denom
            if math.isfinite(t):
                return min(max(t, lo), hi)
    return 0.5 * (lo + hi)


def _strong_wolfe(fun, x, f0, g0, d, t, c1, c2, max_evals):
    """Line search on ``phi(t) = fun(x + t d)`` (minimization form).

    Returns ``(t, f, g, ok)``.  When the Wolfe conditions cannot be met the
    best sufficient-decrease point seen is returned with ``ok=False``; if none
    was seen ``t`` is 0.
    """
    dg0 = g0 @ d
    best = (0.0, f0, g0)
    evals = 0

    def phi(step):
        nonlocal evals, best
        evals += 1
        f, g = fun(x + step * d)
        f = -f
        g = -g
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            return math.inf, None, math.inf
        if f <= f0 + c1 * step * dg0 and f < best[1]:
            best = (step, f, g)
        return f, g, g @ d

    t_prev, f_prev, dg_prev = 0.0, f0, dg0
    lo = hi = None
    while evals < max_evals:
        f, g, dg = phi(t)
        if f > f0 + c1 * t * dg0 or (t_prev > 0 and f >= f_prev):
            lo, hi = (t_prev, f_prev, dg_prev), (t, f, dg)
            break
        if abs(dg) <= -c2 * dg0:
            return t, f, g, True
        if dg >= 0:
            lo, hi = (t, f, dg), (t_prev, f_prev, dg_prev)
            break
        t_next = _cubic_min(t_prev, f_prev, dg_prev, t, f, dg, t + 0.01 * (t - t_prev), 10.0 * t)
        t_prev, f_prev, dg_prev = t, f, dg
        t = t_next
    else:
        return best[0], best[1], best[2], False

    # zoom phase: lo always satisfies sufficient decrease and has the lower value
    dnorm = np.max(np.abs(d))
    while evals < max_evals:
        (tl, fl, gl), (th, fh, gh) = lo, hi
        if abs(th - tl) * dnorm < 1e-14:
            break
        a, b = min(tl, th), max(tl, th)
        if math.isfinite(fh) and gh is not None and math.isfinite(gh):
            t = _cubic_min(tl, fl, gl, th, fh, gh, a, b)
        else:
            t = 0.5 * (a + b)
        # keep the trial away from the bracket ends
        margin = 0.1 * (b - a)
        if t - a < margin or b - t < margin:
            t = 0.5 * (a + b)
        f, g, dg = phi(t)
        if f > f0 + c1 * t * dg0 or f >= fl:
            hi = (t, f, dg)
        else:
            if abs(dg) <= -c2 * dg0:
                return t, f, g, True
            if dg * (th - tl) >= 0:
                hi = lo
            lo = (t, f, dg)
    return best[0], best[1], best[2], False


def maximize(fun: ObjectiveFn, x0, config: OptimConfig = OptimConfig()) -> OptimResult:
    """Maximize ``fun`` (returning value and gradient) with L-BFGS.

    The returned point never has a lower value than ``x0``.  Status is one of
    ``converged`` (gradient norm within tolerance), ``stalled`` (objective no
    longer changes at working precision), ``max_iterations`` or
    ``line_search_failed``.
    """
    x = np.array(x0, dtype=float)
    val, grad = fun(x)
    val = float(val)
    grad = np.asarray(grad, dtype=float)
    if not math.isfinite(val) or not np.all(np.isfinite(grad)):
        raise OptimError("objective or gradient is not finite at the starting point")
    if grad.shape != x.shape:
        raise OptimError(f"gradient shape {grad.shape} does not match x shape {x.shape}")

    f, g = -val, -grad
    s_hist: deque = deque(maxlen=config.memory)
    y_hist: deque = deque(maxlen=config.memory)
    status = MAX_ITER
    it = 0
    failed_once = False
    while it < config.max_iterations:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= config.gradient_tolerance:
            status = CONVERGED
            break
        d = -two_loop_direction(g, list(s_hist), list(y_hist))
        if d @ g >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        t0 = 1.0 if s_hist else min(1.0, 1.0 / float(np.sum(np.abs(g))))
        t, f_new, g_new, ok = _strong_wolfe(
            fun, x, f, g, d, t0, config.sufficient_decrease, config.curvature,
            config.max_line_search)
        it += 1
        if t == 0.0:
            if failed_once or not s_hist:
                status = LS_FAILED
                break
            # retry once from a steepest-ascent step with fresh memory
            failed_once = True
            s_hist.clear()
            y_hist.clear()
            continue
        s = t * d
        y = g_new - g
        x = x + s
        f_old, f, g = f, f_new, g_new
        if y @ s > 1e-12 * float(np.linalg.norm(y) * np.linalg.norm(s)):
            s_hist.append(s)
            y_hist.append(y)
        if not ok:
            if failed_once:
                status = LS_FAILED
                break
            failed_once = True
            s_hist.clear()
            y_hist.clear()
            continue
        failed_once = False
        if abs(f_old - f) <= config.value_tolerance * max(1.0, abs(f_old)):
            status = STALLED
            break
    return OptimResult(x, -f, status, it, float(np.linalg.norm(g)))
