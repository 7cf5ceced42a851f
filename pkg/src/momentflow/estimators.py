"""scikit-learn style wrapper around CoLoRA pre-training.

``ColoraRegressor`` takes rows ``(t, mu, x_1, ..., x_d)`` and targets ``q``
and exposes the usual ``fit`` / ``predict`` / ``get_params`` surface.  The
online propagation routines stay plain functions in
:mod:`momentflow.filtered`; they do not map onto estimator semantics.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import colora, pretrain


class ColoraRegressor(RegressorMixin, BaseEstimator):
    """CoLoRA network with a hyper-network over ``(t, mu)``.

    Parameters mirror :class:`momentflow.pretrain.TrainConfig`.

    Attributes
    ----------
    model_ : ColoraModel
    hyper_ : HyperNet
    history_ : list of dict
        Per-epoch objective values.
    """

    def __init__(self, width=64, n_layers=5, rank=16, activation="tanh",
                 hyper_width=64, hyper_layers=4, epochs=300, learning_rate=1e-3,
                 batch_size=4096, mc_samples=10, sigma_noise=0.01,
                 mode="bayesian", init_std=0.1, seed=0):
        self.width = width
        self.n_layers = n_layers
        self.rank = rank
        self.activation = activation
        self.hyper_width = hyper_width
        self.hyper_layers = hyper_layers
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.mc_samples = mc_samples
        self.sigma_noise = sigma_noise
        self.mode = mode
        self.init_std = init_std
        self.seed = seed

    def _config(self):
        return pretrain.TrainConfig(
            epochs=self.epochs, learning_rate=self.learning_rate,
            batch_size=self.batch_size, mc_samples=self.mc_samples,
            sigma_noise=self.sigma_noise, mode=self.mode, seed=self.seed,
            width=self.width, n_layers=self.n_layers, rank=self.rank,
            activation=self.activation, hyper_width=self.hyper_width,
            hyper_layers=self.hyper_layers, init_std=self.init_std)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if X.shape[1] < 3:
            raise ValueError("X needs columns (t, mu, x_1, ...)")
        cfg = self._config()
        d = X.shape[1] - 2
        # entries sharing (t, mu) form one snapshot group
        _, counts = np.unique(X[:, :2], axis=0, return_counts=True)
        group = int(round(np.mean(counts)))
        model, hyper = pretrain.init_networks(
            d, (X[:, 0].min(), X[:, 0].max()), (X[:, 1].min(), X[:, 1].max()),
            cfg)
        rows = np.column_stack([X, y])
        self.model_, self.hyper_, self.history_ = pretrain.train_rows(
            rows, group, cfg, model, hyper)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_moments(self, X):
        """Mean online weights and their standard deviations per row."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        mean, eta = colora.hyper_outputs(self.hyper_, X[:, 0], X[:, 1])
        return mean, np.logaddexp(0.0, eta)

    def predict(self, X):
        """Network output at the hyper-network mean weights."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected "
                             f"{self.n_features_in_}")
        mean, _ = self.predict_moments(X)
        return colora.forward(self.model_, mean, X[:, 2:])
