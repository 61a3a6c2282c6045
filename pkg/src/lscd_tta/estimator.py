"""scikit-learn front end.

``fit`` trains the source model; ``predict``/``predict_proba`` use it frozen;
``adapt_predict`` treats each call as the next chunk of a target stream and
adapts BN affine parameters online as it goes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adaptation import LOSS_KINDS, AdaptationEngine, TTAConfig
from .benchgen import LabeledSet, TrainConfig, train_source
from .losses import LossWeights
from .network import RUNNING_STATS, Architecture, forward
from .prob import softmax


class LSCDClassifier(ClassifierMixin, BaseEstimator):
    """Batch-normalised MLP with low-saturation test-time adaptation.

    Parameters
    ----------
    hidden : tuple of int
        Widths of the ``Dense -> BN -> ReLU`` blocks.
    epochs, lr, momentum, train_batch_size :
        Source training schedule (SGD with momentum, cross-entropy).
    loss : str
        Test-time objective, e.g. ``"lscd"``, ``"entropy"`` or ``"none"``.
    alpha, beta, tau, epsilon : float
        Composite loss weights and weak-density smoothing.
    tta_lr, tta_momentum, batch_size, steps_per_batch, detach_pseudo_labels :
        Online adaptation settings.
    random_state : int
        Seed for initialisation, the train/validation split and batching.
    """

    def __init__(
        self,
        hidden=(64, 64),
        epochs=30,
        lr=0.05,
        momentum=0.9,
        train_batch_size=64,
        loss="lscd",
        alpha=0.25,
        beta=1.0,
        tau=1.5,
        epsilon=0.01,
        tta_lr=0.001,
        tta_momentum=0.9,
        batch_size=32,
        steps_per_batch=1,
        detach_pseudo_labels=False,
        random_state=0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.train_batch_size = train_batch_size
        self.loss = loss
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.epsilon = epsilon
        self.tta_lr = tta_lr
        self.tta_momentum = tta_momentum
        self.batch_size = batch_size
        self.steps_per_batch = steps_per_batch
        self.detach_pseudo_labels = detach_pseudo_labels
        self.random_state = random_state

    def _tta_config(self) -> TTAConfig:
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        return TTAConfig(
            learning_rate=self.tta_lr,
            momentum=self.tta_momentum,
            batch_size=self.batch_size,
            loss=self.loss,
            weights=LossWeights(self.alpha, self.beta, self.tau, self.epsilon),
            detach_pseudo_labels=self.detach_pseudo_labels,
            steps_per_batch=self.steps_per_batch,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.n_features_in_ = X.shape[1]
        arch = Architecture(X.shape[1], tuple(self.hidden), len(self.classes_))
        cfg = TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            momentum=self.momentum,
            batch_size=self.train_batch_size,
            seed=self.random_state,
        )
        self.network_, self.validation_score_ = train_source(
            arch, LabeledSet(X, self._encoder.transform(y)), cfg
        )
        self.reset_adaptation()
        return self

    def reset_adaptation(self):
        """Forget all test-time updates; the next stream starts from the source model."""
        self._engine = None
        return self

    def _check(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} is expecting "
                f"{self.n_features_in_} features as input"
            )
        return X

    def predict_proba(self, X):
        X = self._check(X)
        logits, _ = forward(self.network_, X, RUNNING_STATS)
        return softmax(logits)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def adapt_predict(self, X):
        """Predict ``X`` as the next part of the target stream, adapting as it goes.

        ``X`` is cut into ``batch_size`` chunks; a trailing single row is
        folded into the previous chunk because batch statistics need two.
        """
        X = self._check(X)
        if len(X) < 2:
            raise ValueError("adapt_predict needs at least 2 samples per call")
        if self._engine is None:
            self._engine = AdaptationEngine(self.network_, self._tta_config())
        bounds = list(range(0, len(X), self.batch_size)) + [len(X)]
        if bounds[-1] - bounds[-2] < 2:
            del bounds[-2]
        preds = [self._engine.adapt_batch(X[a:b])[0] for a, b in zip(bounds, bounds[1:])]
        return self.classes_[np.concatenate(preds)]

    @property
    def adapted_network_(self):
        check_is_fitted(self, "network_")
        return self.network_ if self._engine is None else self._engine.net
