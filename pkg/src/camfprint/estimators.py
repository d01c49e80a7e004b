"""scikit-learn style wrappers around the two networks.

``SignatureNetwork`` is a classifier over device labels whose ``transform``
yields 1024-d signatures; ``SimilarityNetwork`` is a binary classifier over
``(n, 2, 1024)`` signature pairs.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .signature import Phase1Config, build_signature_net, fit_signature_net, truncate
from .similarity import (
    DEFAULT_GRID,
    Phase2Config,
    SimilarityNetSpec,
    best_threshold,
    build_similarity_net,
    fit_similarity_net,
    score_arrays,
)
from .validation import check_binary_labels, check_images, check_pair_array, preprocess


class SignatureNetwork(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Device classifier whose block-5 activations are the signatures.

    ``fit(X, y)`` takes uint8 images ``(n, H, W, 3)`` and device labels.
    """

    def __init__(
        self,
        input_size=(256, 256),
        epochs=15,
        stop_epoch=5,
        learning_rate=0.001,
        momentum=0.95,
        weight_decay=0.0005,
        batch_size=32,
        random_state=0,
    ):
        self.input_size = input_size
        self.epochs = epochs
        self.stop_epoch = stop_epoch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> Phase1Config:
        return Phase1Config(
            epochs=self.epochs,
            stop_epoch=self.stop_epoch,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, self.input_size)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two devices")
        val_codes = None
        if X_val is not None:
            lookup = {c: k for k, c in enumerate(self.classes_)}
            val_codes = np.array([lookup[v] for v in np.asarray(y_val)])
        self.model_ = build_signature_net(len(self.classes_), self.input_size, seed=self.random_state)
        result = fit_signature_net(self.model_, X, codes, self._config(), X_val, val_codes)
        self.channel_mean_ = result.channel_mean
        self.history_ = result.log
        self.extractor_ = truncate(self.model_, self.channel_mean_)
        self.extractor_version_ = self.extractor_.version
        return self

    def transform(self, X):
        check_is_fitted(self, "extractor_")
        return self.extractor_.extract(X, self.batch_size)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size)
        self.model_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), self.batch_size):
                x = preprocess(X[start : start + self.batch_size], self.channel_mean_)
                out.append(torch.softmax(self.model_(x), dim=1).numpy())
        return np.concatenate(out)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class SimilarityNetwork(ClassifierMixin, BaseEstimator):
    """Same-device classifier on signature pairs.

    ``predict`` thresholds the score at ``threshold_``, chosen to maximise
    validation F1 when validation pairs are given to ``fit`` and 0.5
    otherwise.
    """

    def __init__(
        self,
        hidden_units=64,
        epochs=30,
        learning_rate=0.005,
        lr_decay_factor=0.5,
        lr_decay_every=3,
        batch_size=32,
        momentum=0.0,
        grid=DEFAULT_GRID,
        random_state=0,
    ):
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.batch_size = batch_size
        self.momentum = momentum
        self.grid = grid
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        A, B = check_pair_array(X, X.shape[-1] if hasattr(X, "shape") else 1024)
        y = check_binary_labels(y, len(A))
        spec = SimilarityNetSpec(signature_dim=A.shape[1], hidden_units=self.hidden_units)
        self.model_ = build_similarity_net(spec, seed=self.random_state)
        cfg = Phase2Config(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.random_state,
        )
        n = len(A)
        S = np.concatenate([A, B])
        val = None
        if X_val is not None:
            VA, VB = check_pair_array(X_val, A.shape[1])
            yv = check_binary_labels(y_val, len(VA))
            m = len(VA)
            S = np.concatenate([S, VA, VB])
            val = (np.arange(2 * n, 2 * n + m), np.arange(2 * n + m, 2 * n + 2 * m), yv)
        result = fit_similarity_net(
            self.model_, S, np.arange(n), np.arange(n, 2 * n), y, cfg, val
        )
        self.history_ = result.log
        self.classes_ = np.array([0, 1])
        if X_val is not None:
            self.threshold_, self.selection_f1_ = best_threshold(
                self.decision_function(X_val), yv, self.grid
            )
        else:
            self.threshold_, self.selection_f1_ = 0.5, None
        return self

    def decision_function(self, X):
        """Similarity score in [0, 1] for each pair."""
        check_is_fitted(self, "model_")
        A, B = check_pair_array(X, self.model_.spec.signature_dim)
        return score_arrays(self.model_, A, B)

    def predict_proba(self, X):
        s = self.decision_function(X)
        return np.column_stack([1 - s, s])

    def predict(self, X):
        return (self.decision_function(X) >= self.threshold_).astype(int)
