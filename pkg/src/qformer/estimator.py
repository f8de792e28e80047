"""scikit-learn compatible wrapper around model building and training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .model import build, get_preset
from .training import TrainConfig, train


def check_images(X, dtype=np.float32) -> np.ndarray:
    """Validate image batches: (n, H, W) or (n, H, W, C), finite, square."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W) or (n, H, W, C), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"images must be square, got {X.shape[1]}x{X.shape[2]}")
    return X


class QFormerClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier built on quadrangle (or window) attention.

    Parameters mirror :class:`qformer.training.TrainConfig`; ``preset`` names
    a shipped architecture whose image size, channel count and number of
    classes are adapted to the data passed to :meth:`fit`.
    ``transform`` returns the pooled final-stage features.
    """

    def __init__(self, preset="qformer-micro-h", attention="quadrangle", lam=1.0, epochs=30,
                 batch_size=64, lr=1e-3, weight_decay=0.05, warmup_epochs=2,
                 freeze_quad=False, seed=0, dtype="float32", model_overrides=None):
        self.preset = preset
        self.attention = attention
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.freeze_quad = freeze_quad
        self.seed = seed
        self.dtype = dtype
        self.model_overrides = model_overrides

    def _train_config(self, X, n_classes):
        overrides = dict(self.model_overrides or {})
        overrides.update(image_size=X.shape[1], in_chans=X.shape[3], num_classes=n_classes,
                         attention=self.attention, lam=self.lam)
        mcfg = get_preset(self.preset, **overrides)
        return TrainConfig(model=mcfg, lr=self.lr, weight_decay=self.weight_decay,
                           epochs=self.epochs, batch_size=self.batch_size,
                           warmup_epochs=self.warmup_epochs, seed=self.seed,
                           freeze_quad=self.freeze_quad, dtype=self.dtype)

    def fit(self, X, y, eval_set=None, log=None):
        """Train from scratch.

        ``eval_set`` is an optional ``(X_test, y_test)`` pair evaluated after
        every epoch; the parameters with the best evaluation accuracy are kept.
        """
        X = check_images(X, np.dtype(self.dtype))
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = self._train_config(X, len(self.classes_))
        self.train_config_ = cfg
        self.model_ = build(cfg.model, seed=self.seed, dtype=np.dtype(cfg.dtype))
        test = None
        if eval_set is not None:
            Xt = check_images(eval_set[0], np.dtype(self.dtype))
            yt = np.asarray(eval_set[1])
            unseen = np.setdiff1d(yt, self.classes_)
            if unseen.size:
                raise ValueError(f"eval_set has labels not seen in y: {unseen.tolist()}")
            test = (Xt, np.searchsorted(self.classes_, yt))
        self.history_, best = train(self.model_, cfg, (X, y_enc), test, log=log)
        if best is not None:
            for k, v in best.items():
                self.model_.params[k].value = v
        return self

    def _logits(self, X, batch_size=256):
        check_is_fitted(self, ["model_", "classes_"])
        X = check_images(X, self.model_.dtype)
        out = []
        for start in range(0, len(X), batch_size):
            logits, _ = self.model_.forward(X[start:start + batch_size], freeze_quad=self.freeze_quad)
            out.append(logits.value)
        return np.concatenate(out, axis=0)

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, ["model_"])
        X = check_images(X, self.model_.dtype)
        feats, _ = self.model_.features(X, freeze_quad=self.freeze_quad)
        return feats.value

    def frozen_twin(self):
        """Unfitted copy of this estimator with the quadrangle head pinned at identity."""
        twin = self.__class__(**self.get_params())
        twin.set_params(freeze_quad=True)
        return twin

