"""scikit-learn style front end: ``fit`` on a dataset, ``predict`` a split."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import HIDDEN, KHOP, RADIUS_KM, TAU, WINDOW, TrainConfig
from .evaluation import metrics, model_predictions, persistence_predictions
from .graphbuild import WindowSampler
from .training import fit
from .validation import check_dataset, check_fitted


class AdaptiveGraphForecaster(BaseEstimator):
    """Next-step grid forecaster with learned per-snapshot graph structure.

    ``fit(ds)`` optionally pretrains by reconstruction (``pretrain_epochs > 0``)
    and then fine-tunes the forecasting head on the training split.
    ``predict(ds, split)`` returns physical-unit forecasts for every grid node
    and label step of the split, ordered step-major then by node id.
    """

    def __init__(self, hidden=HIDDEN, tau=TAU, window=WINDOW, khop=KHOP, radius_km=RADIUS_KM,
                 structure="adaptive", use_distance=True, epochs=60, pretrain_epochs=0, lr=3e-3,
                 lam=1e-6, batch_size=16, windows_per_epoch=256, freeze_structure=False, seed=0,
                 options=None):
        self.hidden = hidden
        self.tau = tau
        self.window = window
        self.khop = khop
        self.radius_km = radius_km
        self.structure = structure
        self.use_distance = use_distance
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.lam = lam
        self.batch_size = batch_size
        self.windows_per_epoch = windows_per_epoch
        self.freeze_structure = freeze_structure
        self.seed = seed
        self.options = options

    def train_config(self, phase="finetune") -> TrainConfig:
        cfg = TrainConfig(
            phase=phase, epochs=self.pretrain_epochs if phase == "pretrain" else self.epochs,
            lr=self.lr, lam=self.lam, tau=self.tau, hidden=self.hidden, m=self.window, k=self.khop,
            radius_km=self.radius_km, batch_size=self.batch_size,
            windows_per_epoch=self.windows_per_epoch, seed=self.seed, structure=self.structure,
            use_distance=self.use_distance,
            freeze_structure=self.freeze_structure and phase == "finetune",
            **(self.options or {}))
        return cfg.validate()

    def fit(self, X, y=None):
        cfg = self.train_config()
        check_dataset(X, cfg.m)
        sampler = WindowSampler(X, cfg.m, cfg.k, cfg.radius_km, cfg.obs_obs)
        init = None
        self.pretrain_history_ = []
        if self.pretrain_epochs:
            pre = fit(X, self.train_config("pretrain"), sampler=sampler)
            init = pre.checkpoint
            self.pretrain_history_ = pre.history
        res = fit(X, cfg, init=init, sampler=sampler)
        self.params_ = res.params
        self.checkpoint_ = res.checkpoint
        self.history_ = res.history
        self.diverged_ = res.diverged
        self.config_ = cfg
        return self

    def predict(self, X, split="test"):
        check_fitted(self)
        check_dataset(X, self.config_.m)
        return model_predictions(self.params_, X, self.config_, split)[1]

    def score(self, X, y=None, split="test"):
        """Variable-averaged R^2 on ``split``."""
        check_fitted(self)
        _, pred, truth = model_predictions(self.params_, X, self.config_, split)
        return metrics(pred, truth).mean_r2()


class PersistenceForecaster(BaseEstimator):
    """Predicts ``x_{t+1} = x_t`` on the same (node, step) pairs as the model."""

    def __init__(self, window=WINDOW):
        self.window = window

    def fit(self, X, y=None):
        check_dataset(X, self.window)
        self.params_ = {}
        return self

    def predict(self, X, split="test"):
        check_fitted(self)
        return persistence_predictions(X, split, self.window)[1]

    def score(self, X, y=None, split="test"):
        _, pred, truth = persistence_predictions(X, split, self.window)
        return metrics(pred, truth).mean_r2()
