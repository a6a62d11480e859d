"""scikit-learn style front end for the segmenter and its training strategies."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import DiseaseDataset, normalize_slices
from .masks import DEFAULT_LAMBDA, MaskSpec
from .segmenter import NUM_CLASSES, ModelConfig
from .training import TrainConfig, train_mts, train_nts


def check_images(X, size=None, name="X"):
    """Validate a stack of 2D images; returns a float32 (n, H, W) array."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n_samples, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if size is not None and tuple(X.shape[1:]) != tuple(size):
        raise ValueError(f"{name} spatial size {X.shape[1:]} differs from the fitted size {tuple(size)}")
    return X


def check_labels(y, X):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ValueError(f"y shape {y.shape} must match X shape {X.shape}")
    if y.size and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")
    return y.astype(np.uint8)


class MultiDiseaseSegmenter(BaseEstimator):
    """Four-class cardiac segmenter trained with NTS or MTS, on CTD or ITD.

    Parameters
    ----------
    strategy : {'mts', 'nts'}
        'mts' draws one sub-batch per disease each step and optimizes the
        summed per-disease losses; 'nts' trains on pooled batches.
    occlusion : bool
        Mask training images (ITD) when True.
    mask_kind : {'ideal', 'gaussian'}
    mask_lambda : float or None
        None uses 0.25 for ideal masks and 0.4 for Gaussian masks.
    epochs, batch_size, learning_rate, betas, eps
        Training settings; Adam is the optimizer.
    depth, base_channels, attention, attention_heads
        Network shape; ``attention=True`` gives the attention-bottleneck variant.
    normalize : bool
        Standardize every slice before it reaches the network.
    random_state : int
    """

    def __init__(
        self,
        strategy="mts",
        occlusion=True,
        mask_kind="ideal",
        mask_lambda=None,
        paper_literal_center_range=False,
        epochs=8,
        batch_size=8,
        learning_rate=1e-3,
        betas=(0.9, 0.999),
        eps=1e-8,
        depth=3,
        base_channels=16,
        attention=False,
        attention_heads=1,
        normalize=True,
        random_state=0,
    ):
        self.strategy = strategy
        self.occlusion = occlusion
        self.mask_kind = mask_kind
        self.mask_lambda = mask_lambda
        self.paper_literal_center_range = paper_literal_center_range
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.depth = depth
        self.base_channels = base_channels
        self.attention = attention
        self.attention_heads = attention_heads
        self.normalize = normalize
        self.random_state = random_state

    def _train_config(self, size):
        lam = DEFAULT_LAMBDA[self.mask_kind] if self.mask_lambda is None else self.mask_lambda
        return TrainConfig(
            strategy=str(self.strategy).upper(),
            key=bool(self.occlusion),
            epochs=self.epochs,
            batch_size=self.batch_size,
            mask=MaskSpec(self.mask_kind, float(lam), self.paper_literal_center_range),
            model=ModelConfig(
                depth=self.depth,
                base_channels=self.base_channels,
                attention=self.attention,
                attention_heads=self.attention_heads,
                input_size=size,
            ),
            lr=self.learning_rate,
            betas=tuple(self.betas),
            eps=self.eps,
            seed=int(self.random_state or 0),
            runs=1,
        ).validate()

    def fit(self, X, y, diseases=None):
        """Train on images ``X`` (n, H, W) with labels ``y``.

        ``diseases`` gives one key per image; it is required for MTS and
        ignored by NTS.
        """
        X = check_images(X)
        y = check_labels(y, X)
        cfg = self._train_config(X.shape[1:])
        if self.normalize:
            X = normalize_slices(X)
        if cfg.strategy == "MTS":
            if diseases is None:
                raise ValueError("MTS needs a disease key per sample (pass diseases=...)")
            diseases = np.asarray(diseases).astype(str)
            if diseases.shape != (len(X),):
                raise ValueError("diseases must give one key per sample")
            datasets = {
                k: DiseaseDataset(k, X[diseases == k], y[diseases == k]) for k in sorted(set(diseases.tolist()))
            }
            self.model_, self.history_ = train_mts(datasets, cfg)
            self.diseases_ = sorted(datasets)
        else:
            self.model_, self.history_ = train_nts(DiseaseDataset(None, X, y), cfg)
            self.diseases_ = None
        self.input_size_ = tuple(X.shape[1:])
        return self

    @property
    def input_size(self):
        check_is_fitted(self, "model_")
        return self.input_size_

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        if self.normalize:
            X = normalize_slices(X)
        return self.model_.predict_proba(X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=-1).astype(np.uint8)

    def score(self, X, y):
        """Mean foreground Dice over RV, MYO and LV."""
        from .metrics import dice

        pred = self.predict(X)
        y = check_labels(y, check_images(X))
        return float(np.mean([dice(pred == c, y == c) for c in (1, 2, 3)]))
