"""scikit-learn style wrapper around the iterative adaptation loop."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .data import SOURCE, TARGET, DatasetSplit, SampleSet
from .loop import run_dida
from .models import ModelBundle
from .stages import StageConfig, features, predict_proba


def _check_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=2)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class DiDAClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Target-domain classifier trained by alternating adaptation and disentanglement.

    ``fit(X, y, X_target)`` takes labeled source images and unlabeled target
    images. ``transform`` returns common features; :meth:`specific_features`
    returns the domain-specific ones.
    """

    def __init__(
        self,
        backbone="dann",
        alpha=None,
        beta=0.05,
        grl_lambda=1.0,
        d_common=32,
        d_specific=16,
        dida_iterations=4,
        da_epochs=15,
        di_epochs=10,
        batch_size=64,
        lr=1e-3,
        pool_size=None,
        pairing="random",
        pool_policy="replace",
        warm_start=True,
        random_state=0,
    ):
        self.backbone = backbone
        self.alpha = alpha
        self.beta = beta
        self.grl_lambda = grl_lambda
        self.d_common = d_common
        self.d_specific = d_specific
        self.dida_iterations = dida_iterations
        self.da_epochs = da_epochs
        self.di_epochs = di_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.pool_size = pool_size
        self.pairing = pairing
        self.pool_policy = pool_policy
        self.warm_start = warm_start
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        cfg = RunConfig(
            da=StageConfig(epochs=self.da_epochs, batch_size=self.batch_size, backbone=self.backbone,
                           alpha=self.alpha, grl_lambda=self.grl_lambda, lr=self.lr),
            di=StageConfig(epochs=self.di_epochs, batch_size=self.batch_size, beta=self.beta, lr=self.lr),
            d_common=self.d_common,
            d_specific=self.d_specific,
            dida_iterations=self.dida_iterations,
            warm_start=self.warm_start,
            output_dir=None,
        )
        cfg.synthesis.pool_size = self.pool_size
        cfg.synthesis.pairing = self.pairing
        cfg.synthesis.policy = self.pool_policy
        seed = int(self.random_state or 0)
        cfg.seeds.init = cfg.seeds.data = cfg.seeds.pairing = seed
        return cfg.validate()

    def fit(self, X, y, X_target):
        X = _check_images(X)
        Xt = _check_images(X_target)
        if X.shape[1:] != Xt.shape[1:]:
            raise ValueError(f"source images {X.shape[1:]} and target images {Xt.shape[1:]} differ")
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        k = len(self.classes_)

        src = SampleSet(X, [f"s{i}" for i in range(len(X))], SOURCE, y_enc)
        tgt = SampleSet(Xt, [f"t{i}" for i in range(len(Xt))], TARGET)
        self.report_ = run_dida(self._run_config(), DatasetSplit(src, src.subset(np.arange(0)), k),
                                DatasetSplit(tgt, tgt.subset(np.arange(0)), k), keep_bundle=True)
        self.bundle_: ModelBundle = self.report_.bundle
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        return predict_proba(self.bundle_, torch.from_numpy(_check_images(X))).numpy()

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        return self.classes_[self.predict_proba(X).argmax(1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        return features(self.bundle_, torch.from_numpy(_check_images(X)), "common").numpy()

    def specific_features(self, X) -> np.ndarray:
        check_is_fitted(self, "bundle_")
        return features(self.bundle_, torch.from_numpy(_check_images(X)), "specific").numpy()
