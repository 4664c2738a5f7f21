"""scikit-learn style wrappers around training, bound learning and the defense.

Every estimator stores only its constructor arguments in ``__init__`` and puts
learned state in trailing-underscore attributes, so ``get_params``/``clone``
work as usual.  Inputs are flat rows or arrays in the network's input geometry.
"""
from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import mmdf
from ._validation import check_clean_set, check_labels, check_samples
from .data import Dataset
from .margin import AscentConfig
from .mitigation import MitigationConfig, run_mitigation
from .network import BoundVectors, Network, bounded_forward, cnn_s, mlp
from .training import TrainConfig, train


def _logits(net: Network, Z, X, batch: int = 4096) -> np.ndarray:
    parts = [bounded_forward(net, Z, X[i:i + batch]) for i in range(0, len(X), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, net.num_classes))


class CEClassifier(ClassifierMixin, BaseEstimator):
    """Cross-entropy baseline on a fresh MLP or small CNN.

    Parameters
    ----------
    arch : {"mlp", "cnn_s"}
    input_shape : tuple or None
        Geometry of one sample; defaults to ``(n_features,)``.
    num_classes : int or None
        Defaults to ``max(y) + 1``.
    """

    def __init__(self, arch="mlp", hidden=(128, 64), input_shape=None, num_classes=None, epochs=60,
                 batch_size=64, lr=0.05, momentum=0.9, weight_decay=5e-4, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed

    def _build(self, shape, k) -> Network:
        if self.arch == "mlp":
            return mlp(int(np.prod(shape)), k, tuple(self.hidden), seed=self.seed)
        if self.arch == "cnn_s":
            return cnn_s(shape, k, seed=self.seed)
        raise ValueError(f"unknown arch {self.arch!r}")

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        shape = tuple(self.input_shape) if self.input_shape is not None else X.shape[1:]
        k = int(self.num_classes) if self.num_classes is not None else int(np.max(y)) + 1
        X, y = check_labels(X, y, shape, k)
        if self.arch == "mlp":
            X = X.reshape(len(X), -1)
        net = self._build(shape, k)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay, seed=self.seed)
        self.network_, self.history_ = train(net, Dataset(X, y, k), cfg)
        self.classes_ = np.arange(k)
        self.n_features_in_ = int(np.prod(shape))
        return self

    def _inputs(self, X):
        check_is_fitted(self, "network_")
        return check_samples(X, self.network_.input_shape)

    def decision_function(self, X) -> np.ndarray:
        X = self._inputs(X)
        return _logits(self.network_, None, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


class MaxMarginClipper(ClassifierMixin, BaseEstimator):
    """Learn activation upper bounds for a frozen network from a small clean set.

    ``objective="mmac"`` preserves the original logits (backdoor mitigation);
    ``objective="mmom"`` fits the clean labels (imbalance and over-training).
    ``fit(X, y)`` takes the balanced clean set; the network weights never change.
    """

    def __init__(self, network=None, objective="mmac", lam=3e-3, max_iter=300, tol=1e-4, step=0.1,
                 optimizer="adam", min_iter=100, beta=2.0, restarts=None, ascent_steps=10,
                 ascent_step_size=0.1, seed=0):
        self.network = network
        self.objective = objective
        self.lam = lam
        self.max_iter = max_iter
        self.tol = tol
        self.step = step
        self.optimizer = optimizer
        self.min_iter = min_iter
        self.beta = beta
        self.restarts = restarts
        self.ascent_steps = ascent_steps
        self.ascent_step_size = ascent_step_size
        self.seed = seed

    def config(self) -> MitigationConfig:
        return MitigationConfig(lam=self.lam, max_iter=self.max_iter, tol=self.tol, step=self.step,
                                optimizer=self.optimizer, min_iter=self.min_iter, beta=self.beta,
                                ascent=AscentConfig(steps=self.ascent_steps, step_size=self.ascent_step_size),
                                restarts=self.restarts, seed=self.seed)

    def fit(self, X, y):
        if not isinstance(self.network, Network):
            raise TypeError("MaxMarginClipper needs a trained Network")
        net = self.network
        D = check_clean_set(X, y, net.input_shape, net.num_classes)
        self.bounds_, self.history_ = run_mitigation(net, D, self.config(), self.objective)
        self.classes_ = np.arange(net.num_classes)
        self.n_features_in_ = int(np.prod(net.input_shape))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "bounds_")
        return _logits(self.network, self.bounds_, check_samples(X, self.network.input_shape))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


class MMDFDetector(ClassifierMixin, BaseEstimator):
    """Sample-level trigger detector built from a network and its learned bounds.

    ``fit(X)`` estimates the Gaussian null on clean samples; ``predict`` returns
    corrected labels and ``verdicts`` the full per-sample decisions.
    """

    def __init__(self, network=None, bounds=None, theta=0.005):
        self.network = network
        self.bounds = bounds
        self.theta = theta

    def fit(self, X, y=None):
        if not isinstance(self.network, Network) or not isinstance(self.bounds, BoundVectors):
            raise TypeError("MMDFDetector needs a Network and its BoundVectors")
        self.bounds.check(self.network)
        X = check_samples(X, self.network.input_shape)
        self.null_ = mmdf.fit_null(self.network, self.bounds, X, self.theta)
        self.classes_ = np.arange(self.network.num_classes)
        self.n_features_in_ = int(np.prod(self.network.input_shape))
        return self

    def verdicts(self, X, theta=None) -> list:
        check_is_fitted(self, "null_")
        X = check_samples(X, self.network.input_shape)
        return mmdf.defend_batch(self.network, self.bounds, self.null_, X, theta)

    def predict(self, X) -> np.ndarray:
        return np.array([v.label for v in self.verdicts(X)], dtype=np.int64)

    def flag(self, X, theta=None) -> np.ndarray:
        return np.array([v.flagged for v in self.verdicts(X, theta)], dtype=bool)
