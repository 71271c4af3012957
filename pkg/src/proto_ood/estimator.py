"""scikit-learn compatible wrapper around the prototype OOD head."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .proto_head import OODDecisionConfig, classify_ood, project, score_features
from .trainer import TrainConfig, train_arrays

BACKGROUND_LABEL = -1


class ProtoOODDetector(TransformerMixin, BaseEstimator):
    """Prototype-similarity OOD detector over fixed object features.

    ``fit(X, y)`` takes ID categories ``0..t-1`` in ``y``; rows labelled
    ``-1`` are background proposals and only serve as negatives for the
    similarity module.  After fitting:

    * ``transform`` returns the projected embeddings,
    * ``score_samples`` the OOD energy (higher = more in-distribution),
    * ``predict`` 1 for in-distribution (energy >= ``gamma``), 0 otherwise,
    * ``predict_category`` the classifier's category.
    """

    def __init__(self, epochs=60, lambda_start=20, omega_gap=5, alpha=0.9, tau=0.2, T=2.0,
                 focal_exponent=2.0, batch_size=64, learning_rate=1e-3, d=16, proj_hidden=64,
                 sim_hidden=64, ablation="full", gamma=1.0, reduction="max_over_categories",
                 eq4_literal=False, random_state=0):
        self.epochs = epochs
        self.lambda_start = lambda_start
        self.omega_gap = omega_gap
        self.alpha = alpha
        self.tau = tau
        self.T = T
        self.focal_exponent = focal_exponent
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.d = d
        self.proj_hidden = proj_hidden
        self.sim_hidden = sim_hidden
        self.ablation = ablation
        self.gamma = gamma
        self.reduction = reduction
        self.eq4_literal = eq4_literal
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lambda_start=self.lambda_start, omega_gap=self.omega_gap,
                           alpha=self.alpha, tau=self.tau, T=self.T, focal_exponent=self.focal_exponent,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=int(self.random_state or 0), ablation=self.ablation, d=self.d,
                           proj_hidden=self.proj_hidden, sim_hidden=self.sim_hidden,
                           eq4_literal=self.eq4_literal)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("y must hold integer category labels")
            y = y.astype(np.int64)
        if np.any(y < BACKGROUND_LABEL):
            raise ValueError("labels must be >= -1")
        fg = y != BACKGROUND_LABEL
        if not fg.any():
            raise ValueError("fit needs at least one in-distribution sample")
        self.classes_ = np.arange(int(y[fg].max()) + 1)
        self.n_features_in_ = X.shape[1]
        decision = OODDecisionConfig(self.gamma, self.reduction)
        self.state_, self.report_ = train_arrays(X[fg], y[fg], X[~fg], len(self.classes_),
                                                 self._train_config(), decision)
        return self

    def _check(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._check(X)
        return project(X, self.state_.projection)

    def score_samples(self, X):
        X = self._check(X)
        return score_features(self.state_, X, self.reduction).E

    def decision_function(self, X):
        return self.score_samples(X) - self.gamma

    def predict(self, X):
        return classify_ood(self.score_samples(X), OODDecisionConfig(self.gamma, self.reduction))

    def predict_category(self, X):
        X = self._check(X)
        return np.argmax(self.state_.classifier.forward(X), axis=1)
