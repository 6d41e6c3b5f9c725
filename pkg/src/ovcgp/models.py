"""Uniform posterior / conditioning interface over exact and sparse models."""

from __future__ import annotations

from functools import singledispatch

import numpy as np

from .exact import ExactGPModel, PosteriorGaussian, condition_exact, predict
from .ovc import ovc_condition
from .sparse import CanonicalState, VariationalState, canonical_to_variational, sgpr_predict


@singledispatch
def posterior(model, X, full_cov: bool = True) -> PosteriorGaussian:
    """Latent posterior at ``X`` (which may carry leading batch axes)."""
    raise TypeError(f"unsupported model type {type(model).__name__}")


@posterior.register
def _(model: ExactGPModel, X, full_cov=True):
    return predict(model, X, full_cov)


@posterior.register
def _(model: VariationalState, X, full_cov=True):
    return sgpr_predict(model, X, full_cov)


@posterior.register
def _(model: CanonicalState, X, full_cov=True):
    return sgpr_predict(canonical_to_variational(model), X, full_cov)


@singledispatch
def condition(model, X, y, noise=None) -> ExactGPModel:
    """Condition on (possibly batched) observations, returning an exact GP."""
    raise TypeError(f"unsupported model type {type(model).__name__}")


@condition.register
def _(model: ExactGPModel, X, y, noise=None):
    return condition_exact(model, X, y, noise)


@condition.register
def _(model: VariationalState, X, y, noise=None):
    return ovc_condition(model, X, y, noise)


def params_of(model):
    return model.params


def train_inputs(model) -> np.ndarray:
    """Inputs the model has seen (inducing points for sparse models)."""
    return np.asarray(model.Z if hasattr(model, "Z") else model.X)
