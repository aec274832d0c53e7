"""scikit-learn style wrapper around the two-stage trainer.

>>> est = MinMaxCAM(epochs=5, lambda1=1.0, lambda2=1.0).fit(X, y)   # doctest: +SKIP
>>> maps = est.localize(X)                                         # doctest: +SKIP
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels, check_positive
from .cam import NORMALIZE_FIRST, compute_maps
from .minmax import StageTwoConfig, TrainConfig, train
from .nets import predict_logits
from .experiments import pooled_features


class _ArraySplit:
    def __init__(self, images, labels):
        self.images = images
        self.labels = labels


class MinMaxCAM(ClassifierMixin, BaseEstimator):
    """CAM classifier whose head is regularized for localization.

    ``X`` holds images shaped N x 3 x H x W with pixels in [0, 1]; ``y``
    holds integer class ids.  After ``fit``, ``localize`` returns one
    [0, 1] map per image at input resolution and ``transform`` returns the
    pooled backbone features.
    """

    def __init__(
        self,
        epochs: int = 10,
        lr1: float = 0.05,
        lr2: Optional[float] = None,
        momentum: float = 0.9,
        lambda1: float = 1.0,
        lambda2: float = 1.0,
        S: int = 5,
        N: int = 8,
        mask_variant: str = "input",
        intensity_aug: Optional[tuple] = None,
        channels: tuple = (16, 32, 64),
        K: int = 64,
        stride_mod: bool = False,
        batches_per_epoch: Optional[int] = None,
        map_order: str = NORMALIZE_FIRST,
        random_state: int = 0,
    ):
        self.epochs = epochs
        self.lr1 = lr1
        self.lr2 = lr2
        self.momentum = momentum
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.S = S
        self.N = N
        self.mask_variant = mask_variant
        self.intensity_aug = intensity_aug
        self.channels = channels
        self.K = K
        self.stride_mod = stride_mod
        self.batches_per_epoch = batches_per_epoch
        self.map_order = map_order
        self.random_state = random_state

    def _train_config(self, n_classes: int) -> TrainConfig:
        check_positive("lr1", self.lr1, allow_zero=True)
        check_positive("lr2", self.lr2)
        return TrainConfig(
            epochs=self.epochs, lr1=self.lr1, momentum=self.momentum, seed=self.random_state,
            S=self.S, N=min(self.N, n_classes),
            stage2=StageTwoConfig(self.lambda1, self.lambda2, self.lr2),
            intensity_aug=self.intensity_aug, mask_variant=self.mask_variant,
            batches_per_epoch=self.batches_per_epoch, map_order=self.map_order,
            stride_mod=self.stride_mod, channels=tuple(self.channels), K=self.K,
        ).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        cfg = self._train_config(len(self.classes_))
        result = train(cfg, _ArraySplit(X, y_idx), n_classes=len(self.classes_))
        self.model_ = result.model
        self.training_log_ = result.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.spec.in_channels, self.model_.spec.min_input)

    def decision_function(self, X) -> np.ndarray:
        return predict_logits(self.model_, self._check_X(X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def localize(self, X, y=None) -> np.ndarray:
        """Localization maps for classes ``y`` (predicted classes when omitted)."""
        X = self._check_X(X)
        if y is None:
            idx = np.argmax(predict_logits(self.model_, X), axis=1)
        else:
            y = check_labels(y, len(X))
            idx = np.searchsorted(self.classes_, y)
            if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
                raise ValueError("labels contain classes not seen during fit")
        return compute_maps(self.model_, X, idx, order=self.map_order)

    def transform(self, X) -> np.ndarray:
        """Pooled backbone features, N x K."""
        return pooled_features(self.model_, self._check_X(X))
