"""Online variational conditioning for sparse Gaussian processes.

Sparse variational GP states are turned into pseudo-data so they can be
conditioned on new observations like an exact GP, streamed with
projection updates, and used inside look-ahead acquisition functions.
"""

from .errors import NotPositiveDefiniteError, NumericalError, StateError
from .estimators import ExactGPRegressor, SparseGPClassifier, SparseGPRegressor
from .exact import (ExactGPModel, PosteriorGaussian, condition_exact, fit_exact,
                    log_marginal_likelihood, predict, train_hypers_exact)
from .kernels import KernelHyperparams, matern52_ard
from .likelihoods import LikelihoodSpec, laplace_surrogate_batch, newton_map
from .linalg import cholesky_with_jitter, pivoted_cholesky, woodbury_inverse_update
from .models import condition, posterior
from .noise import NoiseModel
from .ovc import (PseudoDataset, load_snapshot, ovc_condition, save_snapshot, stream_step,
                  stream_update, to_pseudo_data)
from .sparse import (CanonicalState, InducingSet, VariationalState, canonical_from_data,
                     canonical_to_variational, select_inducing, sgpr_collapsed_elbo,
                     sgpr_predict, svgp_elbo, train_sparse, variational_to_canonical)

__version__ = "0.1.0"

__all__ = [
    "NotPositiveDefiniteError", "NumericalError", "StateError",
    "ExactGPRegressor", "SparseGPClassifier", "SparseGPRegressor",
    "ExactGPModel", "PosteriorGaussian", "condition_exact", "fit_exact",
    "log_marginal_likelihood", "predict", "train_hypers_exact",
    "KernelHyperparams", "matern52_ard",
    "LikelihoodSpec", "laplace_surrogate_batch", "newton_map",
    "cholesky_with_jitter", "pivoted_cholesky", "woodbury_inverse_update",
    "condition", "posterior", "NoiseModel",
    "PseudoDataset", "load_snapshot", "ovc_condition", "save_snapshot", "stream_step",
    "stream_update", "to_pseudo_data",
    "CanonicalState", "InducingSet", "VariationalState", "canonical_from_data",
    "canonical_to_variational", "select_inducing", "sgpr_collapsed_elbo", "sgpr_predict",
    "svgp_elbo", "train_sparse", "variational_to_canonical",
]
