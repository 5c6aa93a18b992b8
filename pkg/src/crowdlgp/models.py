"""Multi-annotator models trained by EM.

Three variants share one machinery:

``ID``
    Logistic classifier ``p(z=1|x) = logistic(alpha . x + beta)``.  Points no
    annotator labeled contribute nothing to the likelihood and are dropped.
``LGP``
    Logistic classifier ``logistic(xi . x + xi0)`` whose weights carry the
    graph prior ``exp(-eta xi^T A xi)``.  All training points enter through A.
``ML-ORIGINAL``
    ``ID`` with every annotator weight vector frozen at zero, so each
    annotator has a single input-independent noise level.

Every annotator label is ``N(y; z, sigma_t(x))`` with sigma from
:mod:`crowdlgp.annotators`.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from . import annotators as ann
from .annotators import SIGMA_MIN, AnnotatorParams
from .data import LabelMatrix, ScalingParams
from .graph import GraphPrior
from .optim import OptimConfig, maximize

log = logging.getLogger(__name__)

FORMAT_NAME = "crowdlgp-model"
FORMAT_VERSION = 1


class ModelKind(str, enum.Enum):
    ID = "ID"
    LGP = "LGP"
    ML_ORIGINAL = "ML-ORIGINAL"

    @classmethod
    def parse(cls, s: Union[str, "ModelKind"]) -> "ModelKind":
        if isinstance(s, cls):
            return s
        key = str(s).strip().upper().replace("_", "-")
        for k in cls:
            if k.value == key:
                return k
        raise ValueError(f"unknown model kind {s!r}; expected one of ID, LGP, ML-ORIGINAL")


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class IdParams:
    alpha: np.ndarray
    beta: float = 0.0

    @property
    def coef(self) -> np.ndarray:
        return self.alpha

    @property
    def intercept(self) -> float:
        return self.beta


@dataclass(frozen=True)
class LgpParams:
    xi: np.ndarray
    xi0: float = 0.0

    @property
    def coef(self) -> np.ndarray:
        return self.xi

    @property
    def intercept(self) -> float:
        return self.xi0


ClassifierParams = Union[IdParams, LgpParams]


@dataclass(frozen=True)
class Posterior:
    """Per-point probability that the true label is 1."""

    p1: np.ndarray

    def __post_init__(self):
        p = np.array(self.p1, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "p1", p)

    @property
    def p0(self) -> np.ndarray:
        return 1.0 - self.p1

    @property
    def delta(self) -> np.ndarray:
        return self.p1 - self.p0

    def hard_labels(self) -> np.ndarray:
        return (self.p1 >= 0.5).astype(np.int8)


@dataclass(frozen=True)
class ParamGrad:
    coef: np.ndarray
    intercept: float
    w: np.ndarray       # T x D
    gamma: np.ndarray   # T


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 1e-6
    max_iterations: int = 200
    objective_tolerance: float = 1e-9
    sigma_min: float = SIGMA_MIN
    ridge: float = 0.0
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.epsilon <= 0 or self.max_iterations < 1:
            raise ValueError("epsilon must be positive and max_iterations >= 1")
        if not 0 < self.sigma_min < 1:
            raise ValueError("sigma_min must lie in (0, 1)")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    final_objective: float
    converged: bool
    objective_history: tuple = ()


@dataclass(frozen=True)
class TrainedModel:
    kind: ModelKind
    classifier: ClassifierParams
    annotators: tuple
    posterior: Posterior
    scaling: ScalingParams
    diagnostics: FitDiagnostics
    eta: Optional[float] = None
    bandwidth: Optional[float] = None
    sigma_min: float = SIGMA_MIN

    @property
    def d(self) -> int:
        return self.classifier.coef.shape[0]

    @property
    def num_annotators(self) -> int:
        return len(self.annotators)


# ---------------------------------------------------------------------------
# Shared vectorized pieces
# ---------------------------------------------------------------------------

def _log_prior_table(X, coef, intercept) -> np.ndarray:
    u = X @ coef + intercept
    return np.column_stack([log_expit(-u), log_expit(u)])


def _log_joint(X, coef, intercept, W, gamma, labels: LabelMatrix, sigma_min):
    """N x 2 table of ``log p(z) + sum_t log p(y_t | x, z)``."""
    S, _ = ann.sigma_matrix(X, W, gamma, sigma_min)
    return _log_prior_table(X, coef, intercept) + ann.loglik_table(labels.values, labels.observed, S)


def _posterior(X, coef, intercept, W, gamma, labels, sigma_min) -> Posterior:
    joint = _log_joint(X, coef, intercept, W, gamma, labels, sigma_min)
    p1 = np.exp(joint[:, 1] - logsumexp(joint, axis=1))
    # unlabeled points get the classifier probability itself, not a round trip through logs
    unlabeled = ~labels.labeled_points
    p1[unlabeled] = expit(X[unlabeled] @ coef + intercept)
    return Posterior(p1)


def _expected_objective(X, coef, intercept, W, gamma, labels, p1, sigma_min, ridge,
                        want_annotator_grad=True):
    """Expected complete-data log-likelihood and its gradient."""
    u = X @ coef + intercept
    value = float(np.sum(p1 * log_expit(u) + (1.0 - p1) * log_expit(-u)))
    resid = p1 - expit(u)
    d_coef = X.T @ resid
    d_int = float(resid.sum())

    S, active = ann.sigma_matrix(X, W, gamma, sigma_min)
    obs = labels.observed
    # expected squared error E[(y - z)^2] = P(z != y)
    r = np.where(labels.values == 1, (1.0 - p1)[:, None], p1[:, None])
    term = -np.log(S) - ann.LOG_SQRT_2PI - r / (2.0 * S * S)
    value += float(np.sum(np.where(obs, term, 0.0)))
    if want_annotator_grad:
        G = np.where(obs & active, (r / (S * S) - 1.0) * (1.0 - S), 0.0)
        dW = G.T @ X
        dg = G.sum(axis=0)
    else:
        dW = np.zeros_like(W)
        dg = np.zeros_like(gamma)
    if ridge:
        value -= ridge * float(np.sum(W * W) + np.sum(gamma * gamma))
        dW = dW - 2.0 * ridge * W
        dg = dg - 2.0 * ridge * gamma
    return value, ParamGrad(d_coef, d_int, dW, dg)


def _annotator_arrays(annotators, d):
    if len(annotators) == 0:
        return np.zeros((0, d)), np.zeros(0)
    return ann.stack(list(annotators))


def _check_dims(X, coef, W, labels):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    if coef.shape != (X.shape[1],):
        raise ValueError(f"classifier has {coef.shape[0]} weights, X has {X.shape[1]} features")
    if labels.n != X.shape[0]:
        raise ValueError(f"labels cover {labels.n} points, X has {X.shape[0]}")
    if W.shape != (labels.num_annotators, X.shape[1]):
        raise ValueError(f"expected {labels.num_annotators} annotators of dimension {X.shape[1]}")
    return X


# ---------------------------------------------------------------------------
# E-steps and M-step objectives
# ---------------------------------------------------------------------------

def e_step_id(params: IdParams, annotators, X, labels: LabelMatrix,
              sigma_min: float = SIGMA_MIN) -> Posterior:
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.alpha, W, labels)
    return _posterior(X, params.alpha, params.beta, W, g, labels, sigma_min)


def e_step_lgp(params: LgpParams, annotators, X, labels: LabelMatrix,
               sigma_min: float = SIGMA_MIN) -> Posterior:
    # the graph prior on xi does not depend on z and cancels on normalization
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.xi, W, labels)
    return _posterior(X, params.xi, params.xi0, W, g, labels, sigma_min)


def m_step_objective_id(params: IdParams, annotators, X, labels: LabelMatrix,
                        posterior: Posterior, sigma_min: float = SIGMA_MIN,
                        ridge: float = 0.0) -> tuple[float, ParamGrad]:
    """Expected complete-data log-likelihood under ``posterior`` and its gradient.

    The classifier gradient is ``sum_i (p~_i - p_i) x_i`` where ``p_i`` is the
    current classifier probability; annotator gradients weight
    ``[(y - z)^2 / sigma^2 - 1](1 - sigma)(x, 1)`` by the posterior.
    """
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.alpha, W, labels)
    return _expected_objective(X, params.alpha, params.beta, W, g, labels,
                               posterior.p1, sigma_min, ridge)


def m_step_objective_lgp(params: LgpParams, annotators, X, labels: LabelMatrix,
                         prior: GraphPrior, posterior: Posterior,
                         sigma_min: float = SIGMA_MIN,
                         ridge: float = 0.0) -> tuple[float, ParamGrad]:
    """As :func:`m_step_objective_id` minus ``eta xi^T A xi`` (intercept unpenalized)."""
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.xi, W, labels)
    value, grad = _expected_objective(X, params.xi, params.xi0, W, g, labels,
                                      posterior.p1, sigma_min, ridge)
    value -= prior.penalty(params.xi)
    return value, replace(grad, coef=grad.coef - prior.penalty_grad(params.xi))


def observed_loglik(kind, params: ClassifierParams, annotators, X, labels: LabelMatrix,
                    prior: Optional[GraphPrior] = None, sigma_min: float = SIGMA_MIN,
                    ridge: float = 0.0) -> float:
    """Log marginal likelihood of the observed labels (plus log priors).

    Each point contributes ``log sum_z p(z|x) prod_t p(y_t|x, z)``; points
    without labels contribute exactly zero.  LGP subtracts ``eta xi^T A xi``.
    """
    kind = ModelKind.parse(kind)
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.coef, W, labels)
    joint = _log_joint(X, params.coef, params.intercept, W, g, labels, sigma_min)
    labeled = labels.labeled_points
    value = float(np.sum(logsumexp(joint[labeled], axis=1)))
    if kind is ModelKind.LGP:
        if prior is None:
            raise ValueError("LGP requires a graph prior")
        value -= prior.penalty(params.coef)
    if ridge:
        value -= ridge * float(np.sum(W * W) + np.sum(g * g))
    return value


def marginal_gradient(kind, params: ClassifierParams, annotators, X, labels: LabelMatrix,
                      prior: Optional[GraphPrior] = None,
                      sigma_min: float = SIGMA_MIN) -> ParamGrad:
    """Gradient of :func:`observed_loglik` from the ratio-of-sums form.

    For each point the classifier gradient is
    ``sum_z dp(z|x) prod_t a_t(z) / sum_z p(z|x) prod_t a_t(z)`` and the
    gradient for annotator s replaces ``a_s`` by its derivative in the
    numerator.  Products are rescaled by their per-point maximum to stay
    finite.  No posterior object is formed, so this serves as an independent
    check on the EM gradients.
    """
    kind = ModelKind.parse(kind)
    W, g = _annotator_arrays(annotators, np.shape(X)[1])
    X = _check_dims(X, params.coef, W, labels)
    S, active = ann.sigma_matrix(X, W, g, sigma_min)
    lik = ann.loglik_table(labels.values, labels.observed, S)
    prod = np.exp(lik - lik.max(axis=1, keepdims=True))   # prod_t a_t(z), rescaled
    p = expit(X @ params.coef + params.intercept)
    pz = np.column_stack([1.0 - p, p])
    den = np.sum(pz * prod, axis=1)
    labeled = labels.labeled_points

    dp1 = p * (1.0 - p)               # d p(z=1)/du; d p(z=0)/du = -dp1
    num_u = dp1 * (prod[:, 1] - prod[:, 0])
    ratio_u = np.where(labeled, num_u / den, 0.0)
    d_coef = X.T @ ratio_u
    d_int = float(ratio_u.sum())
    if kind is ModelKind.LGP:
        if prior is None:
            raise ValueError("LGP requires a graph prior")
        d_coef = d_coef - prior.penalty_grad(params.coef)

    T = W.shape[0]
    dW = np.zeros_like(W)
    dg = np.zeros(T)
    for s in range(T):
        obs_s = labels.observed[:, s] & active[:, s]
        y = labels.values[:, s]
        num = np.zeros(X.shape[0])
        for z in (0, 1):
            # d a_s / d u_s = a_s * [(y - z)^2 / s^2 - 1](1 - s)
            dlog = ((y - z) ** 2 / S[:, s] ** 2 - 1.0) * (1.0 - S[:, s])
            num += pz[:, z] * prod[:, z] * dlog
        ratio = np.where(obs_s, num / den, 0.0)
        dW[s] = X.T @ ratio
        dg[s] = ratio.sum()
    return ParamGrad(d_coef, d_int, dW, dg)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def soft_majority_vote(labels: LabelMatrix) -> np.ndarray:
    """Laplace-smoothed vote share ``(ones + 1) / (n + 2)``; 0.5 when unlabeled."""
    ones = np.sum(labels.values * labels.observed, axis=1)
    n = labels.observed.sum(axis=1)
    return (ones + 1.0) / (n + 2.0)


class _Packer:
    """Flatten (coef, intercept, W, gamma) into one optimization vector."""

    def __init__(self, d: int, t: int, fit_w: bool):
        self.d, self.t, self.fit_w = d, t, fit_w

    def pack(self, coef, intercept, W, gamma) -> np.ndarray:
        parts = [coef, [intercept]]
        if self.fit_w:
            parts.append(W.ravel())
        parts.append(gamma)
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def unpack(self, v):
        d, t = self.d, self.t
        coef = v[:d]
        intercept = float(v[d])
        pos = d + 1
        if self.fit_w:
            W = v[pos:pos + t * d].reshape(t, d)
            pos += t * d
        else:
            W = np.zeros((t, d))
        gamma = v[pos:pos + t]
        return coef, intercept, W, gamma

    def pack_grad(self, grad: ParamGrad) -> np.ndarray:
        return self.pack(grad.coef, grad.intercept, grad.w, grad.gamma)


def fit(kind, X, labels: LabelMatrix, prior: Optional[GraphPrior] = None,
        config: FitConfig = FitConfig(), scaling: Optional[ScalingParams] = None) -> TrainedModel:
    """Run EM until the annotator parameters stop moving.

    ``X`` is used as given (standardize beforehand); ``scaling`` is only
    recorded on the returned model.  ID and ML-ORIGINAL train on labeled
    points only; LGP trains on all points and needs ``prior`` built over the
    same rows of ``X``.

    The first E-step is replaced by the smoothed majority vote.  Iteration
    stops when ``sum_t ||w_t - w_t'||^2 + (gamma_t - gamma_t')^2 < epsilon``
    or the observed objective changes by less than ``objective_tolerance``.
    """
    kind = ModelKind.parse(kind)
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    T = labels.num_annotators
    if labels.n != n:
        raise ValueError(f"labels cover {labels.n} points, X has {n}")
    if kind is ModelKind.LGP:
        if prior is None:
            raise ValueError("LGP requires a graph prior")
        if prior.prior_matrix.shape != (d, d):
            raise ValueError("graph prior dimension does not match X")
        rows = np.arange(n)
    else:
        rows = np.flatnonzero(labels.labeled_points)
    Xf = X[rows]
    Lf = labels.subset(rows)
    if Lf.n == 0 or not Lf.observed.any():
        raise FitError("no labeled points to fit")

    sm, ridge = config.sigma_min, config.ridge
    packer = _Packer(d, T, fit_w=kind is not ModelKind.ML_ORIGINAL)
    penalty = prior if kind is ModelKind.LGP else None

    def observed(coef, intercept, W, gamma):
        joint = _log_joint(Xf, coef, intercept, W, gamma, Lf, sm)
        v = float(np.sum(logsumexp(joint[Lf.labeled_points], axis=1)))
        if penalty is not None:
            v -= penalty.penalty(coef)
        if ridge:
            v -= ridge * float(np.sum(W * W) + np.sum(gamma * gamma))
        return v

    coef, intercept = np.zeros(d), 0.0
    W, gamma = np.zeros((T, d)), np.zeros(T)
    p1 = np.where(Lf.labeled_points, soft_majority_vote(Lf), 0.5)

    history: list[float] = []
    converged = False
    it = 0
    while it < config.max_iterations:
        it += 1

        def objective(v, p1=p1):
            c, b, Wv, gv = packer.unpack(v)
            val, grad = _expected_objective(Xf, c, b, Wv, gv, Lf, p1, sm, ridge,
                                            want_annotator_grad=True)
            if penalty is not None:
                val -= penalty.penalty(c)
                grad = replace(grad, coef=grad.coef - penalty.penalty_grad(c))
            return val, packer.pack_grad(grad)

        res = maximize(objective, packer.pack(coef, intercept, W, gamma), config.optim)
        new_coef, new_int, new_W, new_gamma = packer.unpack(res.x)
        obj = observed(new_coef, new_int, new_W, new_gamma)
        if not math.isfinite(obj) or not np.all(np.isfinite(res.x)):
            raise FitError(f"non-finite objective at EM iteration {it} ({kind.value})")
        if history and obj < history[-1] - 1e-8:
            raise FitError(
                f"observed objective decreased at EM iteration {it}: "
                f"{history[-1]!r} -> {obj!r}")
        change = float(np.sum((new_W - W) ** 2) + np.sum((new_gamma - gamma) ** 2))
        prev = history[-1] if history else None
        history.append(obj)
        coef, intercept, W, gamma = new_coef, new_int, new_W, new_gamma
        log.debug("EM %s iter %d: objective %.10g, change %.3g, m-step %s",
                  kind.value, it, obj, change, res.status)
        if change < config.epsilon or (prev is not None and abs(obj - prev) < config.objective_tolerance):
            converged = True
            break
        p1 = _posterior(Xf, coef, intercept, W, gamma, Lf, sm).p1

    classifier = (LgpParams(coef.copy(), intercept) if kind is ModelKind.LGP
                  else IdParams(coef.copy(), intercept))
    annots = tuple(ann.unstack(W, gamma))
    posterior = _posterior(X, coef, intercept, W, gamma, labels, sm)
    diag = FitDiagnostics(it, history[-1], converged, tuple(history))
    return TrainedModel(
        kind=kind, classifier=classifier, annotators=annots, posterior=posterior,
        scaling=scaling if scaling is not None else ScalingParams.identity(d),
        diagnostics=diag,
        eta=prior.eta if penalty is not None else None,
        bandwidth=prior.bandwidth if penalty is not None else None,
        sigma_min=sm,
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(model: TrainedModel, x_new, new_labels=None) -> Union[float, np.ndarray]:
    """Probability that the true label of ``x_new`` is 1.

    ``x_new`` must already be scaled with ``model.scaling``.  A single point
    (1-D input) may come with ``new_labels`` as a mapping annotator -> label;
    a batch (2-D input) with a :class:`LabelMatrix`.  Without labels this is
    the classifier probability; with labels it is the one-point E-step.
    """
    x = np.asarray(x_new, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError(f"model expects {model.d} features, got shape {x.shape}")
    coef, b = model.classifier.coef, model.classifier.intercept
    if new_labels is None:
        p = expit(X @ coef + b)
    else:
        if single:
            if not isinstance(new_labels, Mapping):
                raise TypeError("labels for a single point must be a mapping annotator -> label")
            new_labels = LabelMatrix.from_triples(
                [(0, int(t), int(y)) for t, y in new_labels.items()], 1, model.num_annotators)
        if new_labels.n != X.shape[0] or new_labels.num_annotators != model.num_annotators:
            raise ValueError("label matrix shape does not match points/annotators")
        W, g = ann.stack(list(model.annotators))
        p = _posterior(X, coef, b, W, g, new_labels, model.sigma_min).p1
    return float(p[0]) if single else np.asarray(p)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def model_to_dict(model: TrainedModel) -> dict:
    c = model.classifier
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": model.kind.value,
        "D": model.d,
        "T": model.num_annotators,
    }
    if isinstance(c, LgpParams):
        doc.update(xi=_floats(c.xi), xi0=float(c.xi0))
    else:
        doc.update(alpha=_floats(c.alpha), beta=float(c.beta))
    doc.update(
        annotators=[{"w": _floats(a.w), "gamma": a.gamma} for a in model.annotators],
        scaling={"mean": _floats(model.scaling.mean), "std": _floats(model.scaling.std)},
        eta=model.eta,
        bandwidth=model.bandwidth,
        sigma_min=model.sigma_min,
        posterior=_floats(model.posterior.p1),
        diagnostics={
            "iterations": model.diagnostics.iterations,
            "final_objective": model.diagnostics.final_objective,
            "converged": model.diagnostics.converged,
            "objective_history": list(model.diagnostics.objective_history),
        },
    )
    return doc


def model_from_dict(doc: dict) -> TrainedModel:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError("not a crowdlgp model document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    kind = ModelKind.parse(doc["kind"])
    d, t = int(doc["D"]), int(doc["T"])
    if kind is ModelKind.LGP:
        clf = LgpParams(np.array(doc["xi"], dtype=float), float(doc["xi0"]))
    else:
        clf = IdParams(np.array(doc["alpha"], dtype=float), float(doc["beta"]))
    annots = tuple(AnnotatorParams(np.array(a["w"], dtype=float), a["gamma"])
                   for a in doc["annotators"])
    if clf.coef.shape != (d,) or len(annots) != t or any(a.w.shape != (d,) for a in annots):
        raise ValueError("model document dimensions are inconsistent")
    dg = doc["diagnostics"]
    return TrainedModel(
        kind=kind,
        classifier=clf,
        annotators=annots,
        posterior=Posterior(np.array(doc["posterior"], dtype=float)),
        scaling=ScalingParams(np.array(doc["scaling"]["mean"]), np.array(doc["scaling"]["std"])),
        diagnostics=FitDiagnostics(int(dg["iterations"]), float(dg["final_objective"]),
                                   bool(dg["converged"]), tuple(dg["objective_history"])),
        eta=doc.get("eta"),
        bandwidth=doc.get("bandwidth"),
        sigma_min=float(doc.get("sigma_min", SIGMA_MIN)),
    )


def save_model(model: TrainedModel, path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> TrainedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
