"""scikit-learn style wrappers around the training strategies.

The estimators take token-id matrices (``[n, seq]`` integers, ``CLS`` at
position 0) and a pretrained ``Backbone``. Fitting never modifies that
backbone; each fit works on its own copy.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numcore as nc
from .backbone import Backbone
from .errors import ConfigError, ContractError, OutOfRangeError, SequenceLengthError, ShapeError
from .metrics import pca_project_2d
from .optim import OptimConfig
from .tasks import Task
from .trainer import STRATEGIES, PetConfig, TrainPlan, train


def check_tokens(X, backbone: Backbone | None = None) -> np.ndarray:
    """Validate a token matrix and return it as a C-contiguous int64 array.

    Float input is accepted only when every entry is integral. With a
    backbone, sequence length and vocabulary bounds are checked as well.
    """
    arr = np.asarray(X)
    if arr.dtype == object:
        raise ContractError("token matrix has object dtype; pass equal-length integer sequences")
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D token matrix [n_samples, seq_len], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ContractError("token matrix has no rows")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.issubdtype(arr.dtype, np.floating) or not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ContractError(f"token ids must be integers, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if backbone is not None:
        cfg = backbone.config
        if arr.shape[1] > cfg.max_seq_len:
            raise SequenceLengthError(f"sequence length {arr.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
        if arr.min() < 0 or arr.max() >= cfg.vocab_size:
            raise OutOfRangeError(f"token ids must lie in [0, {cfg.vocab_size}); got [{arr.min()}, {arr.max()}]")
    return arr


def _check_backbone(backbone) -> Backbone:
    if not isinstance(backbone, Backbone):
        raise ConfigError(f"backbone must be a Backbone instance, got {type(backbone).__name__}")
    return backbone


class BackboneFeatures(TransformerMixin, BaseEstimator):
    """Pooled ``CLS`` features of a frozen backbone; ``fit`` only validates."""

    def __init__(self, backbone=None):
        self.backbone = backbone

    def fit(self, X, y=None):
        bb = _check_backbone(self.backbone)
        check_tokens(X, bb)
        self.n_features_out_ = bb.config.d_model
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        return self.backbone.features(check_tokens(X, self.backbone))


class PCA2D(TransformerMixin, BaseEstimator):
    """Deterministic two-component PCA by power iteration."""

    def __init__(self, tol=1e-8, max_iter=1000):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        proj = pca_project_2d(X, tol=self.tol, max_iter=self.max_iter)
        self.mean_ = proj.mean
        self.components_ = proj.components
        self.explained_variance_ = proj.explained_variance
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        x = np.asarray(X, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.components_.shape[1]:
            raise ShapeError(f"expected [n, {self.components_.shape[1]}] features, got shape {x.shape}")
        return (x - self.mean_) @ self.components_.T


class _StrategyEstimator(BaseEstimator):
    _kind = "classification"

    def __init__(
        self,
        backbone=None,
        strategy="eh-ft-bitfit",
        total_steps=300,
        stage1_fraction=0.1,
        stage1_lr=5e-3,
        stage2_lr=1e-4,
        weight_decay=0.1,
        batch_size=32,
        lora_rank=8,
        prefix_length=8,
        topk=1,
        d_mid=None,
        random_state=0,
    ):
        self.backbone = backbone
        self.strategy = strategy
        self.total_steps = total_steps
        self.stage1_fraction = stage1_fraction
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lora_rank = lora_rank
        self.prefix_length = prefix_length
        self.topk = topk
        self.d_mid = d_mid
        self.random_state = random_state

    def _plan(self) -> TrainPlan:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        optim = dict(weight_decay=self.weight_decay, batch_size=self.batch_size)
        return TrainPlan(
            strategy=self.strategy,
            total_steps=int(self.total_steps),
            stage1_fraction=self.stage1_fraction,
            stage1_optim=OptimConfig(lr_peak=self.stage1_lr, **optim),
            stage2_optim=OptimConfig(lr_peak=self.stage2_lr, **optim),
            seed=int(self.random_state or 0),
            pet=PetConfig(lora_rank=self.lora_rank, prefix_length=self.prefix_length, topk=self.topk),
            d_mid=self.d_mid,
            eval_every=0,
        )

    def _fit(self, X, y_encoded, n_classes: int, metric: str):
        bb = _check_backbone(self.backbone)
        X = check_tokens(X, bb)
        if len(y_encoded) != len(X):
            raise ShapeError(f"X has {len(X)} rows but y has {len(y_encoded)}")
        empty = np.zeros((0, X.shape[1]), dtype=np.int64)
        task = Task("fit", self._kind, n_classes, metric, X, y_encoded, empty, y_encoded[:0])
        model = train(self._plan(), bb, task)
        self.backbone_, self.head_, self.record_ = model.backbone, model.head, model.record
        self.n_features_in_ = X.shape[1]
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        X = check_tokens(X, self.backbone_)
        out = []
        with nc.no_grad():
            for start in range(0, len(X), 256):
                out.append(self.head_.forward_logits(self.backbone_.forward_features(X[start : start + 256])).data)
        return np.concatenate(out).astype(np.float64)


class EHFTClassifier(ClassifierMixin, _StrategyEstimator):
    """Sequence classifier trained with any strategy (default two-stage BitFit head tuning)."""

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1:
            raise ShapeError(f"y must be 1-D, got shape {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes to fit a classifier")
        return self._fit(X, encoded.astype(np.int64), len(self.classes_), "accuracy")

    def predict_proba(self, X):
        z = self._logits(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]


class EHFTRegressor(RegressorMixin, _StrategyEstimator):
    """Sequence regressor with a one-output head and squared-error loss."""

    _kind = "regression"

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1:
            raise ShapeError(f"y must be 1-D, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ContractError("regression targets must be finite")
        return self._fit(X, y, 1, "spearman")

    def predict(self, X):
        return self._logits(X)[:, 0]
