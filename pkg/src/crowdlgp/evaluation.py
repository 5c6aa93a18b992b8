"""Metrics, logistic-regression baselines and the label-proportion experiment."""

from __future__ import annotations

import csv
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import Dataset, LabelMatrix, ScalingParams, mask_labels, standardize, stratified_kfold
from .graph import build_graph_prior
from .models import FitConfig, ModelKind, fit, predict
from .optim import OptimConfig, maximize
from .sim import SimConfig, simulate_labelers

log = logging.getLogger(__name__)

BASELINE_RIDGE = 1e-4
MODEL_METHODS = ("LGP", "ID", "ML-ORIGINAL")
MAJORITY = "MAJORITY-VOTE-LR"
DEFAULT_METHODS = ("LGP", "ID", "ML-ORIGINAL", MAJORITY)
_ANNOTATOR_RE = re.compile(r"^ANNOTATOR-(\d+)-LR$")

RESULT_HEADER = ["method", "proportion", "seed", "fold", "accuracy", "auc", "converged", "iterations"]
AGGREGATE_HEADER = ["method", "proportion", "n", "accuracy_mean", "accuracy_std", "auc_mean", "auc_std"]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError("pred and truth must be non-empty vectors of equal length")
    return float(np.mean(pred == truth))


def roc_auc(scores, truth) -> tuple[np.ndarray, float]:
    """ROC curve over descending unique thresholds and its trapezoid area.

    Returns ``(points, auc)`` where ``points`` is a K x 2 array of
    (false positive rate, true positive rate) starting at (0, 0).  Tied
    scores move along a diagonal segment, which credits ties with one half.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(truth)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and truth must be vectors of equal length")
    pos = int(np.sum(y == 1))
    neg = int(np.sum(y == 0))
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both classes present in truth")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # indices where the threshold changes
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y == 1)[last]
    fp = np.cumsum(y == 0)[last]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.column_stack([fpr, tpr]), auc


def majority_vote(labels: LabelMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Per-point majority label (ties -> 1) and a mask of defined entries."""
    n_obs = labels.observed.sum(axis=1)
    ones = np.sum(labels.values * labels.observed, axis=1)
    vote = (2 * ones >= n_obs).astype(np.int8)
    defined = n_obs > 0
    vote[~defined] = 0
    return vote, defined


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def logistic_objective(X, y, ridge: float):
    """Ridge-penalized Bernoulli log-likelihood as a function of ``[coef, intercept]``.

    The intercept is not penalized.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    d = X.shape[1]

    def f(v):
        coef, b = v[:d], v[d]
        u = X @ coef + b
        val = float(np.sum(y * log_expit(u) + (1 - y) * log_expit(-u)) - ridge * coef @ coef)
        r = y - expit(u)
        return val, np.r_[X.T @ r - 2.0 * ridge * coef, r.sum()]

    return f


def logistic_fit(X, y, ridge: float = BASELINE_RIDGE,
                 config: OptimConfig = OptimConfig(max_iterations=2000, gradient_tolerance=1e-6)):
    """Maximum-likelihood logistic regression. Returns ``(coef, intercept)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("logistic_fit needs both classes in y")
    res = maximize(logistic_objective(X, y, ridge), np.zeros(X.shape[1] + 1), config)
    if not res.converged:
        log.info("logistic_fit stopped with status %s (gradient norm %.2e)", res.status, res.grad_norm)
    return res.x[:-1].copy(), float(res.x[-1])


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    proportion: float
    seed: int
    fold: int
    accuracy: float
    auc: float
    converged: bool
    iterations: int
    # smallest change of the EM objective between iterations; NaN for baselines
    min_objective_step: float = math.nan

    def key(self):
        return (self.method, self.proportion, self.seed, self.fold)


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)

    def sorted(self) -> "ExperimentResult":
        return ExperimentResult(sorted(self.rows, key=ResultRow.key))

    def select(self, method: str, proportion: float) -> list:
        return [r for r in self.rows if r.method == method and r.proportion == proportion]

    def aggregate(self) -> list[tuple]:
        """``(method, proportion, n, acc mean, acc std, auc mean, auc std)`` per cell.

        Failed fits (NaN metrics) are excluded; std is the population std.
        """
        out = []
        for method, prop in sorted({(r.method, r.proportion) for r in self.rows}):
            rows = self.select(method, prop)
            acc = np.array([r.accuracy for r in rows if not math.isnan(r.accuracy)])
            auc = np.array([r.auc for r in rows if not math.isnan(r.auc)])
            stats = [float(a.mean()) if a.size else math.nan for a in (acc, auc)]
            stds = [float(a.std()) if a.size else math.nan for a in (acc, auc)]
            out.append((method, prop, len(acc), stats[0], stds[0], stats[1], stds[1]))
        return out

    def mean_accuracy(self, method: str, proportion: float) -> float:
        vals = [r.accuracy for r in self.select(method, proportion) if not math.isnan(r.accuracy)]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_HEADER)
            for r in self.sorted().rows:
                w.writerow([r.method, repr(r.proportion), r.seed, r.fold, repr(r.accuracy),
                            repr(r.auc), "true" if r.converged else "false", r.iterations])

    def write_aggregate_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(AGGREGATE_HEADER)
            for m, p, n, am, asd, um, usd in self.aggregate():
                w.writerow([m, repr(p), n, repr(am), repr(asd), repr(um), repr(usd)])


@dataclass(frozen=True)
class ExperimentConfig:
    proportions: tuple = (0.1, 0.2, 0.5, 1.0)
    folds: int = 5
    seeds: tuple = (0,)
    methods: tuple = DEFAULT_METHODS
    eta: float = 1.0
    eta_scale: str = "edge-weight"
    bandwidth: Optional[float] = None
    knn: Optional[int] = None
    standardize: bool = True
    fit: FitConfig = field(default_factory=FitConfig)
    jobs: int = 1


def expand_methods(methods: Sequence[str], num_annotators: int) -> list[str]:
    """Normalize names; the literal ``ANNOTATOR-t-LR`` expands to every annotator."""
    out = []
    for m in methods:
        name = m.strip().upper().replace("_", "-")
        if name == "ANNOTATOR-T-LR":
            out.extend(f"ANNOTATOR-{t}-LR" for t in range(num_annotators))
            continue
        match = _ANNOTATOR_RE.match(name)
        if match:
            if int(match.group(1)) >= num_annotators:
                raise ValueError(f"{m}: annotator index out of range (T={num_annotators})")
        elif name not in MODEL_METHODS and name != MAJORITY:
            raise ValueError(f"unknown method {m!r}")
        out.append(name)
    return out


def _score_method(method, Xtr, Ltr, Xte, cfg: ExperimentConfig):
    """Fit one method on a training fold.

    Returns test scores, converged flag, EM iterations and the smallest EM
    objective step.
    """
    if method in MODEL_METHODS:
        prior = None
        if method == "LGP":
            prior = build_graph_prior(Xtr, eta=cfg.eta, bandwidth=cfg.bandwidth, knn=cfg.knn,
                                      eta_scale=cfg.eta_scale)
        model = fit(method, Xtr, Ltr, prior, cfg.fit)
        hist = np.asarray(model.diagnostics.objective_history)
        step = float(np.min(np.diff(hist))) if hist.size > 1 else math.inf
        return predict(model, Xte), model.diagnostics.converged, model.diagnostics.iterations, step
    if method == MAJORITY:
        y, defined = majority_vote(Ltr)
        Xb, yb = Xtr[defined], y[defined]
    else:
        t = int(_ANNOTATOR_RE.match(method).group(1))
        mask = Ltr.observed[:, t]
        Xb, yb = Xtr[mask], Ltr.values[mask, t]
    coef, b = logistic_fit(Xb, yb, BASELINE_RIDGE)
    return expit(Xte @ coef + b), True, 0, math.nan


def _run_cell(args):
    method, prop, seed, fold, Xtr, Ltr, Xte, zte, cfg = args
    try:
        scores, conv, iters, step = _score_method(method, Xtr, Ltr, Xte, cfg)
        acc = accuracy((scores >= 0.5).astype(np.int8), zte)
        auc = roc_auc(scores, zte)[1] if len(np.unique(zte)) == 2 else math.nan
        return ResultRow(method, prop, seed, fold, acc, auc, bool(conv), int(iters), step)
    except Exception as exc:  # a failed cell is recorded, the run goes on
        log.warning("%s proportion=%s seed=%s fold=%s failed: %s", method, prop, seed, fold, exc)
        return ResultRow(method, prop, seed, fold, math.nan, math.nan, False, 0)


def _cells(ds: Dataset, sim: SimConfig, cfg: ExperimentConfig):
    for seed in cfg.seeds:
        seed_sim = SimConfig(sim.num_labelers, sim.error_rate, seed, sim.kmeans_restarts)
        labels, _ = simulate_labelers(ds, seed_sim)
        methods = expand_methods(cfg.methods, labels.num_annotators)
        for fold, (tr, te) in enumerate(stratified_kfold(ds, cfg.folds, seed)):
            train = ds.subset(tr)
            if cfg.standardize:
                train_s, scaling = standardize(train)
            else:
                train_s, scaling = train, ScalingParams.identity(ds.d)
            Xtr = train_s.features
            Xte = scaling.transform(ds.features[te])
            zte = ds.ground_truth[te]
            for prop in cfg.proportions:
                mask_seed = seed * 1_000_003 + fold * 1_009 + round(prop * 1000)
                Ltr = mask_labels(labels.subset(tr), prop, mask_seed, train.ground_truth)
                for method in methods:
                    yield (method, float(prop), int(seed), fold, Xtr, Ltr, Xte, zte, cfg)


def run_experiment(ds: Dataset, sim: SimConfig = SimConfig(),
                   cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Label-proportion sweep with stratified k-fold cross-validation.

    Per seed the annotators are simulated once on the full dataset.  Per fold
    the training part is standardized (statistics from training rows only),
    its labels are masked down to each proportion, and every method is fit
    and scored on the untouched test rows.  The LGP graph covers all
    training rows, labeled or not.
    """
    if ds.ground_truth is None:
        raise ValueError("experiments need ground truth")
    cells = list(_cells(ds, sim, cfg))
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_run_cell, cells, chunksize=1))
    else:
        rows = [_run_cell(c) for c in cells]
    return ExperimentResult(rows).sorted()
