"""scikit-learn style front end for the cooperative model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .architecture import encode
from .config import ArchConfig, TrainConfig
from .core import Tensor, global_avg_pool, no_grad, softmax
from .data import Dataset
from .metrics import ConfusionMatrix
from .training import center_batch, predict, train


def check_images(X, min_size: int) -> np.ndarray:
    """Validate an (n, 3, H, W) batch of square images with H >= ``min_size``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if X.shape[2] < min_size:
        raise ValueError(f"images must be at least {min_size} px, got {X.shape[2]}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_masks(masks, X: np.ndarray, n_classes: int) -> np.ndarray:
    masks = np.asarray(masks)
    if masks.shape != (X.shape[0], X.shape[2], X.shape[3]):
        raise ValueError(f"masks {masks.shape} do not match images {X.shape}")
    if masks.dtype.kind not in "iu":
        raise ValueError("masks must hold integer class ids")
    if masks.min() < 0 or masks.max() >= n_classes:
        raise ValueError(f"mask ids must lie in [0, {n_classes})")
    return masks.astype(np.uint8)


class CooperativeSegmenter(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Joint grade classifier and lesion segmenter sharing one encoder.

    ``fit`` takes images (n, 3, H, W) in [0, 1], integer grades ``y`` and
    per-pixel ``masks`` (n, H, W). Images may be larger than ``input_hw``;
    the surplus is used for random crops during training and cropped
    centrally at prediction time.

    ``predict`` returns grades, ``predict_masks`` segmentation maps and
    ``transform`` the pooled shared-encoder features.
    """

    def __init__(self, input_hw=64, stem_channels=16, levels=((16, 1), (32, 1), (64, 1)),
                 bottleneck_channels=128, clf_head_blocks=1, n_seg_classes=6, pag_fusion="concat",
                 seg_lr=1e-3, lr_ratio=30.0, clf_batch=32, batch_ratio=8, rounds=3000, poly_power=0.9,
                 momentum=0.9, random_label_fraction=0.0, mode="joint", random_state=0):
        self.input_hw = input_hw
        self.stem_channels = stem_channels
        self.levels = levels
        self.bottleneck_channels = bottleneck_channels
        self.clf_head_blocks = clf_head_blocks
        self.n_seg_classes = n_seg_classes
        self.pag_fusion = pag_fusion
        self.seg_lr = seg_lr
        self.lr_ratio = lr_ratio
        self.clf_batch = clf_batch
        self.batch_ratio = batch_ratio
        self.rounds = rounds
        self.poly_power = poly_power
        self.momentum = momentum
        self.random_label_fraction = random_label_fraction
        self.mode = mode
        self.random_state = random_state

    def _arch(self, n_grades: int) -> ArchConfig:
        return ArchConfig(input_hw=self.input_hw, stem_channels=self.stem_channels, levels=list(self.levels),
                          bottleneck_channels=self.bottleneck_channels, num_seg_classes=self.n_seg_classes,
                          num_grades=n_grades, clf_head_blocks=self.clf_head_blocks, pag_fusion=self.pag_fusion)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(seg_lr=self.seg_lr, lr_ratio=self.lr_ratio, clf_batch=self.clf_batch,
                           batch_ratio=self.batch_ratio, rounds=self.rounds, poly_power=self.poly_power,
                           momentum=self.momentum, random_label_fraction=self.random_label_fraction,
                           seed=int(self.random_state or 0), mode=self.mode)

    def fit(self, X, y, masks=None, validation_data=None):
        X = check_images(X, self.input_hw)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must hold one grade per image, got shape {y.shape}")
        if masks is None:
            if self.mode != "clf_only":
                raise ValueError(f"mode {self.mode!r} needs segmentation masks")
            masks = np.zeros((len(X), X.shape[2], X.shape[3]), dtype=np.uint8)
        masks = check_masks(masks, X, self.n_seg_classes)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two grades")
        arch = self._arch(len(self.classes_))
        train_set = _as_dataset(X, codes, masks)
        val_set = None
        if validation_data is not None:
            Xv, yv, mv = validation_data
            Xv = check_images(Xv, self.input_hw)
            val_set = _as_dataset(Xv, np.searchsorted(self.classes_, np.asarray(yv)),
                                  check_masks(mv, Xv, self.n_seg_classes))
        self.model_, self.report_ = train(self._train_config(), train_set, val_set, arch)
        return self

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_hw)
        return center_batch(_as_dataset(X, np.zeros(len(X), np.int64), None), self.input_hw)[0]

    def predict_proba(self, X) -> np.ndarray:
        grade_logits, _ = predict(self.model_, self._prepare(X))
        return softmax(grade_logits, axis=1)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def predict_masks(self, X) -> np.ndarray:
        _, seg_logits = predict(self.model_, self._prepare(X))
        return seg_logits.argmax(axis=1).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        """Globally pooled bottleneck features, shape (n, bottleneck_channels)."""
        x = self._prepare(X)
        with no_grad():
            feats = [global_avg_pool(encode(self.model_, Tensor(x[lo:lo + 50]), "eval").bottleneck).data
                     for lo in range(0, len(x), 50)]
        return np.concatenate(feats).reshape(len(x), -1)

    def score_masks(self, X, masks) -> float:
        """Mean IoU of predicted masks against center-cropped ``masks``."""
        X = check_images(X, self.input_hw)
        masks = check_masks(masks, X, self.n_seg_classes)
        off = (X.shape[2] - self.input_hw) // 2
        truth = masks[:, off:off + self.input_hw, off:off + self.input_hw]
        cm = ConfusionMatrix(self.n_seg_classes).update(truth, self.predict_masks(X))
        return cm.miou()


def _as_dataset(X, grades, masks) -> Dataset:
    n = len(X)
    if masks is None:
        masks = np.zeros((n, X.shape[2], X.shape[3]), dtype=np.uint8)
    return Dataset(images=X, masks=masks, grades=np.asarray(grades, dtype=np.int64),
                   corrupted=np.zeros(n, dtype=bool), indices=np.arange(n))
