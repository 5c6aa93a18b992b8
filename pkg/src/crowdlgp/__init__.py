"""Learning from multiple annotators whose reliability depends on the input.

Implements the ID and logistic + graph-prior (LGP) multi-annotator models,
their EM training, a cluster-expert annotator simulator and an evaluation
harness for label-proportion sweeps.
"""

from .annotators import AnnotatorParams, label_loglik, sigma, sigma_grad_terms
from .data import (Dataset, LabelMatrix, ScalingParams, load_csv, load_labels_csv, mask_labels,
                   standardize, stratified_kfold, write_csv, write_labels_csv)
from .graph import GraphPrior, build_graph_prior, gaussian_weights, laplacian, median_bandwidth, prior_matrix
from .models import (FitConfig, IdParams, LgpParams, ModelKind, Posterior, TrainedModel, e_step_id,
                     e_step_lgp, fit, load_model, m_step_objective_id, m_step_objective_lgp,
                     observed_loglik, predict, save_model)
from .optim import OptimConfig, finite_diff_gradient, maximize
from .sim import SimConfig, kmeans, simulate_labelers

__version__ = "0.1.0"
