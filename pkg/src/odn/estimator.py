"""Scikit-learn style front end for the depth search.

``OptimallyDeepClassifier.fit`` runs warm-up, progressive depth expansion,
and fine-tuning on image arrays, then keeps only the extracted
optimally-deep model for prediction.  It plays by the sklearn estimator
rules (constructor stores hyperparameters untouched, ``get_params`` /
``set_params`` work, fitted attributes end in underscores), so it composes
with model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, split
from .network import build_network, extract_odn
from .search import OptimizerConfig, SearchConfig, evaluate, finetune, search, warmup
from .tensor import Tensor


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"X must be N x C x H x W, got shape {X.shape}")
    if X.shape[2] < 8 or X.shape[3] < 8:
        raise ValueError(f"spatial dims must be at least 8x8, got {X.shape[2:]}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


class OptimallyDeepClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier that searches for the smallest sufficient depth.

    Parameters mirror the search configuration; `fit` expects X of shape
    (N, C, H, W) with float pixel values and integer class labels y.
    """

    def __init__(self, arch: str = "resnet18", width_multiplier: float = 1.0,
                 target_accuracy: float = 0.9, initial_depth: int = 1,
                 final_depth: int | None = None, warmup_epochs: int = 3,
                 warmup_lr: float = 0.01, learning_rate: float = 0.1,
                 momentum: float = 0.9, weight_decay: float = 5e-4,
                 batch_size: int = 128, stop_epochs: int = 23,
                 lr_decay_factor: float = 0.6, lr_decay_interval: int = 5,
                 max_epochs_per_depth: int = 200, val_fraction: float = 0.1,
                 seed: int = 0):
        self.arch = arch
        self.width_multiplier = width_multiplier
        self.target_accuracy = target_accuracy
        self.initial_depth = initial_depth
        self.final_depth = final_depth
        self.warmup_epochs = warmup_epochs
        self.warmup_lr = warmup_lr
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.stop_epochs = stop_epochs
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_interval = lr_decay_interval
        self.max_epochs_per_depth = max_epochs_per_depth
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        X = _check_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y shape {y.shape} does not match N={X.shape[0]}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")

        net = build_network(self.arch, X.shape[1], len(self.classes_),
                            self.width_multiplier, seed=self.seed)
        config = SearchConfig(
            target_accuracy=self.target_accuracy,
            initial_depth=self.initial_depth,
            final_depth=self.final_depth or net.depth_max,
            warmup_epochs=self.warmup_epochs,
            warmup_lr=self.warmup_lr,
            base_lr=self.learning_rate,
            stop_epochs=self.stop_epochs,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_interval=self.lr_decay_interval,
            optimizer=OptimizerConfig(self.learning_rate, self.momentum, self.weight_decay),
            batch_size=self.batch_size,
            seed=self.seed,
            max_epochs_per_depth=self.max_epochs_per_depth,
        )
        dataset = Dataset(X, encoded.astype(np.int64), len(self.classes_), "fit-data")
        pair = split(dataset, self.val_fraction, self.seed)

        warm = warmup(net, pair.train, config)
        result = search(net, pair.train, pair.val, config, warm)
        acc = finetune(net, result.optimal_depth, pair.train, pair.val, config)
        self.model_ = extract_odn(net, result.optimal_depth)
        self.optimal_depth_ = result.optimal_depth
        self.target_reached_ = result.target_reached
        self.search_result_ = result
        self.validation_accuracy_ = acc
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X)
        logits = []
        for start in range(0, X.shape[0], 256):
            out = self.model_.forward(Tensor(X[start : start + 256]), training=False)
            logits.append(out.data)
        return np.concatenate(logits)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
