"""scikit-learn style wrappers: feature transformers and the shift-network classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import audio
from .datasets import FeatureDataset, stack_batch
from .engine import ShiftEngine
from .network import ModelConfig, ResNet, predict_labels
from .trainer import Checkpoint, TrainConfig, train
from .validation import as_clips, check_feature_maps, check_is_fitted, check_labels


class LogMelFeaturizer(TransformerMixin, BaseEstimator):
    """Raw 16 kHz clips -> (T, 80) log-mel maps.  Stateless."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [audio.logmel_features(x) for x in as_clips(X)]


class GlobalCMVN(TransformerMixin, BaseEstimator):
    """Per-dimension standardization with statistics pooled over the whole fit corpus."""

    def __init__(self, corpus_id: str = ""):
        self.corpus_id = corpus_id

    def fit(self, X, y=None):
        self.stats_ = audio.cmvn_fit(check_feature_maps(X, dim=None), self.corpus_id)
        self.n_features_in_ = len(self.stats_.mean)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return [audio.cmvn_apply(f, self.stats_) for f in check_feature_maps(X, dim=self.n_features_in_)]


class FrameStacker(TransformerMixin, BaseEstimator):
    def __init__(self, window: int = audio.STACK_WINDOW, stride: int = audio.STACK_STRIDE):
        self.window = window
        self.stride = stride

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [audio.stack_frames(f, self.window, self.stride) for f in check_feature_maps(X, dim=None)]


class ShiftResNetClassifier(ClassifierMixin, BaseEstimator):
    """ResNet intent classifier trained with quantized (FP32/Qn/Dn/Sn) weights.

    ``fit`` keeps the epoch with the best validation accuracy (``eval_set``,
    or the training data when no validation split is given).
    """

    def __init__(self, arch="toy", mode="s3", epochs=200, batch_size=8, lr=1e-4, eta_min=0.0,
                 momentum=0.9, lambda_sparse=1e-4, optimizer="auto", t_fixed=128,
                 quantize_first=True, quantize_last=True, random_state=0):
        self.arch = arch
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eta_min = eta_min
        self.momentum = momentum
        self.lambda_sparse = lambda_sparse
        self.optimizer = optimizer
        self.t_fixed = t_fixed
        self.quantize_first = quantize_first
        self.quantize_last = quantize_last
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, eta_min=self.eta_min,
                           momentum=self.momentum, lambda_sparse=self.lambda_sparse, seed=self.random_state,
                           mode=self.mode, optimizer=self.optimizer, t_fixed=self.t_fixed)

    def _encode(self, y) -> np.ndarray:
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def fit(self, X, y, eval_set=None):
        maps = check_feature_maps(X)
        y = check_labels(y, len(maps))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = maps[0].shape[1]
        train_set = FeatureDataset(maps, self._encode(y))
        if eval_set is not None:
            Xv, yv = eval_set
            vmaps = check_feature_maps(Xv, name="eval_set X")
            val_set = FeatureDataset(vmaps, self._encode(check_labels(yv, len(vmaps))))
        else:
            val_set = train_set
        config = ModelConfig(arch=self.arch, n_classes=len(self.classes_), mode=self.mode,
                             quantize_first=self.quantize_first, quantize_last=self.quantize_last)
        model = ResNet(config, seed=self.random_state)
        best, history = train(model, train_set, val_set, self._train_config())
        model.load_state_dict(best.params)
        self.model_ = model
        self.checkpoint_ = best
        self.history_ = history
        self.best_epoch_ = best.best_epoch
        self.best_val_score_ = best.best_val_acc
        return self

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, classes=None) -> "ShiftResNetClassifier":
        tc, mc = ck.train_config, ck.model_config
        est = cls(arch=mc["arch"], mode=mc["mode"], epochs=tc["epochs"], batch_size=tc["batch_size"],
                  lr=tc["lr"], eta_min=tc["eta_min"], momentum=tc["momentum"],
                  lambda_sparse=tc["lambda_sparse"], optimizer=tc["optimizer"], t_fixed=tc["t_fixed"],
                  quantize_first=mc["quantize_first"], quantize_last=mc["quantize_last"],
                  random_state=tc["seed"])
        est.model_ = ck.build_model()
        est.checkpoint_ = ck
        est.classes_ = np.arange(mc["n_classes"]) if classes is None else np.asarray(classes)
        est.n_features_in_ = 400
        est.history_ = ck.history
        est.best_epoch_ = ck.best_epoch
        est.best_val_score_ = ck.best_val_acc
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self)
        maps = check_feature_maps(X, dim=self.n_features_in_)
        out = []
        for start in range(0, len(maps), 64):
            x = stack_batch(maps[start : start + 64], self.t_fixed, self.model_.dtype)
            out.append(self.model_.forward(x, training=False))
        return np.concatenate(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[predict_labels(scores)]

    def to_engine(self) -> ShiftEngine:
        """Integer shift-path version of the fitted model (shift modes only)."""
        check_is_fitted(self)
        return ShiftEngine.from_model(self.model_)
