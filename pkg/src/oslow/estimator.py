"""scikit-learn style wrappers around the ordering learners."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .flow import FlowConfig, inverse_and_loglik
from .permutation import from_ordering
from .trainer import TrainConfig, train, varsort


class _OrderingMixin(TransformerMixin):
    def transform(self, X):
        """Columns of ``X`` rearranged into the learned causal order."""
        check_is_fitted(self, "ordering_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X[:, list(self.ordering_)]


class OSLow(_OrderingMixin, BaseEstimator):
    """Learn a causal ordering by fitting a permutation-conditioned flow.

    After ``fit``: ``ordering_`` (0-based, causes first), ``result_`` (the
    full training record) and ``model_``.
    """

    def __init__(self, k=16, epochs=200, batch_size=128, lr_theta=1e-3, lr_gamma=1e-2,
                 weight_decay=1e-2, sigma_init=0.5, phase_lengths=(5, 1), method="gumbel-top-k",
                 tau=0.1, sinkhorn_iters=50, hidden_multipliers=(10, 10), num_transforms=1,
                 base_distribution="standard-normal", random_state=0):
        self.k = k
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_theta = lr_theta
        self.lr_gamma = lr_gamma
        self.weight_decay = weight_decay
        self.sigma_init = sigma_init
        self.phase_lengths = phase_lengths
        self.method = method
        self.tau = tau
        self.sinkhorn_iters = sinkhorn_iters
        self.hidden_multipliers = hidden_multipliers
        self.num_transforms = num_transforms
        self.base_distribution = base_distribution
        self.random_state = random_state

    def _config(self, d: int) -> TrainConfig:
        flow = FlowConfig(d, tuple(self.hidden_multipliers), self.num_transforms, self.base_distribution)
        return TrainConfig(
            k=self.k, epochs=self.epochs, batch_size=self.batch_size, lr_theta=self.lr_theta,
            lr_gamma=self.lr_gamma, weight_decay=self.weight_decay, sigma_init=self.sigma_init,
            phase_lengths=tuple(self.phase_lengths), method=self.method, tau=self.tau,
            sinkhorn_iters=self.sinkhorn_iters, seed=int(self.random_state or 0), flow=flow,
        )

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=3)
        self.n_features_in_ = X.shape[1]
        self.result_ = train(X, self._config(X.shape[1]))
        self.model_ = self.result_.model
        self.ordering_ = self.result_.final_ordering
        return self

    def score(self, X, y=None) -> float:
        """Average log-likelihood of ``X`` under the learned ordering (standardized scale)."""
        check_is_fitted(self, "ordering_")
        X = check_array(X)
        z = self.result_.standardization_stats.apply(X)
        return inverse_and_loglik(self.model_, from_ordering(self.ordering_), z)[1]


class VarSort(_OrderingMixin, BaseEstimator):
    """Baseline: order variables by increasing marginal variance."""

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.n_features_in_ = X.shape[1]
        self.variances_ = X.var(axis=0, ddof=1)
        self.ordering_ = varsort(X)
        return self
