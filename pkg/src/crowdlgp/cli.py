"""Command line interface: ``crowdlgp {simulate,train,predict,experiment}``.

Settings resolve as command-line flags > ``--config`` file > built-in
defaults.  The config file is flat ``key = value`` text; ``#`` starts a
comment and keys use the long flag names with dashes or underscores.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .data import DataError, load_csv, load_labels_csv, standardize, write_labels_csv
from .evaluation import DEFAULT_METHODS, ExperimentConfig, run_experiment
from .graph import ETA_SCALES, build_graph_prior
from .models import FitConfig, ModelKind, fit, load_model, predict, save_model
from .optim import OptimConfig
from .sim import SimConfig, flip_counts, simulate_labelers, write_assignments_csv

log = logging.getLogger("crowdlgp")


class ConfigError(ValueError):
    pass


def _opt_float(s: str) -> Optional[float]:
    return None if str(s).strip().lower() in ("none", "median", "") else float(s)


def _opt_int(s: str) -> Optional[int]:
    return None if str(s).strip().lower() in ("none", "") else int(s)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float_list(s) -> tuple:
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _int_list(s) -> tuple:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def _str_list(s) -> tuple:
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


@dataclass
class RunConfig:
    model: str = "lgp"
    eta: float = 1.0
    eta_scale: str = "edge-weight"
    bandwidth: Optional[float] = None
    knn: Optional[int] = None
    sigma_min: float = 1e-3
    epsilon: float = 1e-6
    max_iterations: int = 200
    ridge: bool = False
    standardize: bool = True
    labelers: int = 5
    error_rate: float = 0.35
    kmeans_restarts: int = 10
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    folds: int = 5
    proportions: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    methods: tuple = DEFAULT_METHODS
    jobs: int = 1

    def validate(self) -> "RunConfig":
        ModelKind.parse(self.model)
        checks = [
            (self.eta >= 0, "eta must be >= 0"),
            (self.eta_scale in ETA_SCALES, f"eta-scale must be one of {ETA_SCALES}"),
            (self.bandwidth is None or self.bandwidth > 0, "bandwidth must be > 0 or 'median'"),
            (self.knn is None or self.knn >= 1, "knn must be >= 1"),
            (0 < self.sigma_min < 1, "sigma-min must lie in (0, 1)"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (self.max_iterations >= 1, "max-iterations must be >= 1"),
            (self.labelers >= 1, "labelers must be >= 1"),
            (0 <= self.error_rate < 1, "error-rate must lie in [0, 1)"),
            (self.kmeans_restarts >= 1, "kmeans-restarts must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (len(self.seeds) >= 1, "seeds must not be empty"),
            (all(0 < p <= 1 for p in self.proportions) and self.proportions,
             "proportions must lie in (0, 1]"),
            (len(self.methods) >= 1, "methods must not be empty"),
            (self.jobs >= 1, "jobs must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def fit_config(self) -> FitConfig:
        return FitConfig(epsilon=self.epsilon, max_iterations=self.max_iterations,
                         sigma_min=self.sigma_min, ridge=1e-6 if self.ridge else 0.0,
                         optim=OptimConfig())


_PARSERS = {
    "model": str, "eta": float, "eta_scale": str, "bandwidth": _opt_float, "knn": _opt_int,
    "sigma_min": float, "epsilon": float, "max_iterations": int, "ridge": _bool,
    "standardize": _bool, "labelers": int, "error_rate": float, "kmeans_restarts": int,
    "seed": int, "seeds": _int_list, "folds": int, "proportions": _float_list,
    "methods": _str_list, "jobs": int,
}


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    for k, v in values.items():
        setattr(cfg, k, v)
    return cfg.validate()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _label_column(s: str):
    return None if s.strip().lower() == "none" else int(s)


def _header(s: str):
    s = s.strip().lower()
    if s not in ("auto", "yes", "no"):
        raise argparse.ArgumentTypeError("header must be auto, yes or no")
    return s


def _read_dataset(path, header: str, label_column):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if header == "auto":
        with path.open(newline="") as fh:
            first = next(csv.reader(fh), [])
        try:
            [float(c) for c in first]
            has_header = False
        except ValueError:
            has_header = True
    else:
        has_header = header == "yes"
    return load_csv(path, has_header=has_header, label_column=label_column)


def _add_data_args(p, name="--data"):
    p.add_argument(name, required=True, metavar="CSV", help="dataset CSV, one row per point")
    p.add_argument("--header", type=_header, default="auto",
                   help="whether the CSV has a header row: auto, yes, no (default: auto)")
    p.add_argument("--label-column", type=_label_column, default=-1, metavar="IDX",
                   help="0-based ground-truth column, negative counts from the end, "
                        "'none' if absent (default: -1)")


def _add_model_args(p):
    p.add_argument("--eta", type=float, help="graph prior strength (default: 1.0)")
    p.add_argument("--eta-scale", choices=ETA_SCALES,
                   help="divide eta by the total edge weight or use it as is (default: edge-weight)")
    p.add_argument("--bandwidth", type=_opt_float, metavar="H",
                   help="Gaussian kernel bandwidth or 'median' (default: median)")
    p.add_argument("--knn", type=_opt_int, help="keep only k-nearest-neighbour edges (default: none)")
    p.add_argument("--sigma-min", type=float, help="floor on annotator noise scale (default: 0.001)")
    p.add_argument("--epsilon", type=float,
                   help="EM stops when the squared annotator parameter change is below this "
                        "(default: 1e-6)")
    p.add_argument("--max-iterations", type=int, help="maximum EM iterations (default: 200)")
    p.add_argument("--ridge", action="store_const", const=True,
                   help="add an L2 penalty of 1e-6 on annotator parameters (default: off)")
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False,
                   help="do not standardize features (default: standardize)")
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdlgp",
        description="Semi-supervised learning from multiple annotators with input-dependent noise.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate cluster-expert annotators")
    _add_data_args(p, "--input")
    p.add_argument("--labelers", type=int, default=None,
                   help="number of annotators = number of k-means clusters (default: 5)")
    p.add_argument("--error-rate", type=float, default=None,
                   help="fraction of off-cluster labels each annotator flips (default: 0.35)")
    p.add_argument("--kmeans-restarts", type=int, default=None, help="k-means restarts (default: 10)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    p.add_argument("--out", required=True, metavar="CSV", help="label matrix output")
    p.add_argument("--clusters", metavar="CSV",
                   help="cluster assignment output (default: <out>.clusters.csv)")
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")

    p = sub.add_parser("train", help="fit a model with EM")
    p.add_argument("--model", type=str.lower, choices=["lgp", "id", "ml-original"],
                   help="model kind (default: lgp)")
    _add_data_args(p)
    p.add_argument("--labels", required=True, metavar="CSV", help="point,annotator,label CSV")
    p.add_argument("--out", required=True, metavar="FILE", help="model output file")
    _add_model_args(p)

    p = sub.add_parser("predict", help="predict true-label probabilities")
    p.add_argument("--model", required=True, metavar="FILE", help="trained model file")
    _add_data_args(p)
    p.add_argument("--labels", metavar="CSV",
                   help="optional annotator labels for the new points (point,annotator,label)")
    p.add_argument("--out", required=True, metavar="CSV", help="predictions CSV (point,p1,label)")

    p = sub.add_parser("experiment", help="label-proportion sweep with cross-validation")
    _add_data_args(p, "--input")
    p.add_argument("--labelers", type=int, help="number of simulated annotators (default: 5)")
    p.add_argument("--error-rate", type=float, help="off-cluster error rate (default: 0.35)")
    p.add_argument("--kmeans-restarts", type=int, help="k-means restarts (default: 10)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default: 0,1,2,3,4)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default: 5)")
    p.add_argument("--proportions", type=_float_list,
                   help="comma-separated labeled proportions (default: 0.1,0.2,...,1.0)")
    p.add_argument("--methods", type=_str_list,
                   help="comma-separated methods from LGP, ID, ML-ORIGINAL, MAJORITY-VOTE-LR, "
                        "ANNOTATOR-<t>-LR, ANNOTATOR-t-LR (default: LGP,ID,ML-ORIGINAL,MAJORITY-VOTE-LR)")
    p.add_argument("--jobs", type=int, help="worker processes (default: 1)")
    p.add_argument("--out", required=True, metavar="CSV", help="per-cell results CSV")
    p.add_argument("--aggregate", metavar="CSV",
                   help="mean/std per method and proportion (default: <out>.aggregate.csv)")
    _add_model_args(p)
    return parser


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    ds = _read_dataset(args.input, args.header, args.label_column)
    sim = SimConfig(cfg.labelers, cfg.error_rate, cfg.seed, cfg.kmeans_restarts)
    labels, assign = simulate_labelers(ds, sim)
    out = Path(args.out)
    write_labels_csv(labels, out)
    clusters = Path(args.clusters) if args.clusters else _sidecar(out, ".clusters.csv")
    write_assignments_csv(assign, clusters)
    print(f"wrote {labels.observed.sum()} labels for {ds.n} points to {out}")
    print(f"wrote cluster assignments to {clusters}")
    print("labeler,cluster_size,off_cluster,flips,off_cluster_error")
    for t, (m, flips, _) in enumerate(flip_counts(labels, ds.ground_truth, assign)):
        rate = flips / m if m else 0.0
        print(f"{t},{ds.n - m},{m},{flips},{rate:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    kind = ModelKind.parse(cfg.model)
    ds = _read_dataset(args.data, args.header, args.label_column)
    labels = load_labels_csv(args.labels, n_points=ds.n)
    if cfg.standardize:
        train, scaling = standardize(ds)
    else:
        train, scaling = ds, None
    prior = None
    if kind is ModelKind.LGP:
        prior = build_graph_prior(train.features, eta=cfg.eta, bandwidth=cfg.bandwidth,
                                  knn=cfg.knn, eta_scale=cfg.eta_scale)
    model = fit(kind, train.features, labels, prior, cfg.fit_config(), scaling=scaling)
    save_model(model, args.out)
    d = model.diagnostics
    print(f"kind={kind.value} iterations={d.iterations} final_objective={d.final_objective!r} "
          f"converged={'true' if d.converged else 'false'}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    ds = _read_dataset(args.data, args.header, args.label_column)
    if ds.d != model.d:
        raise DataError(f"model expects {model.d} features, data has {ds.d}")
    X = model.scaling.transform(ds.features)
    labels = None
    if args.labels:
        labels = load_labels_csv(args.labels, n_points=ds.n, n_annotators=model.num_annotators)
    p1 = np.atleast_1d(predict(model, X, labels))
    with Path(args.out).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "p1", "label"])
        for i, p in enumerate(p1):
            w.writerow([i, repr(float(p)), int(p >= 0.5)])
    print(f"wrote {len(p1)} predictions to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = resolve_config(args)
    ds = _read_dataset(args.input, args.header, args.label_column)
    if ds.ground_truth is None:
        raise DataError("experiment needs a ground-truth label column")
    sim = SimConfig(cfg.labelers, cfg.error_rate, 0, cfg.kmeans_restarts)
    exp = ExperimentConfig(
        proportions=cfg.proportions, folds=cfg.folds, seeds=cfg.seeds, methods=cfg.methods,
        eta=cfg.eta, eta_scale=cfg.eta_scale, bandwidth=cfg.bandwidth, knn=cfg.knn,
        standardize=cfg.standardize, fit=cfg.fit_config(), jobs=cfg.jobs)
    result = run_experiment(ds, sim, exp)
    out = Path(args.out)
    result.write_csv(out)
    agg = Path(args.aggregate) if args.aggregate else _sidecar(out, ".aggregate.csv")
    result.write_aggregate_csv(agg)
    failed = sum(1 for r in result.rows if r.accuracy != r.accuracy)
    print(f"wrote {len(result.rows)} rows to {out} ({failed} failed cells); aggregate in {agg}")
    for m, p, n, am, asd, um, usd in result.aggregate():
        print(f"{m:>18s} p={p:<4g} acc={am:.4f}±{asd:.4f} auc={um:.4f}±{usd:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"crowdlgp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
