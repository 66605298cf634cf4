"""Input checks shared by the estimator, evaluation and CLI layers."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .datamodel import VARIABLES
from .synthgen import ConfigError, Dataset

__all__ = ["check_dataset", "check_window_budget", "check_prediction_pair", "check_fitted", "NotFittedError"]


def check_dataset(ds, m=None):
    """Return ``ds`` if it is a usable dataset; raise otherwise."""
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a Dataset, got {type(ds).__name__}")
    if ds.states.ndim != 3 or ds.states.shape[2] != len(VARIABLES):
        raise ValueError(f"states must be (steps, cells, {len(VARIABLES)}), got {ds.states.shape}")
    if not np.all(np.isfinite(ds.states)):
        raise ValueError("dataset states contain non-finite values")
    if m is not None:
        check_window_budget(ds.n_steps, m)
    return ds


def check_window_budget(n_steps, m):
    if n_steps < m + 1:
        raise ConfigError(f"window m={m} needs at least {m + 1} steps, dataset has {n_steps}")


def check_prediction_pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def check_fitted(est):
    check_is_fitted(est, "params_")
