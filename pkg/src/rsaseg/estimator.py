"""Scikit-learn style facade over the segmentation pipeline."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import data as D
from . import metrics as M
from . import network as N
from . import tensor as T
from . import train as TR
from .errors import NonBinary, ShapeMismatch


def _as_volume_list(X, rank, what):
    vols = [np.asarray(v) for v in X]
    for v in vols:
        if v.ndim != rank:
            raise ShapeMismatch(f"{what} must be rank-{rank}, got {v.shape}")
    return vols


class VolumeSegmenter(BaseEstimator):
    """Volumetric binary segmenter: U-Net backbone, optional attention.

    X is a sequence of [C, D, H, W] volumes (or one [N, C, D, H, W]
    array), y the matching [D, H, W] masks with values in {0, 1}.
    Constructor arguments are stored verbatim; everything learned lands
    in trailing-underscore attributes on fit.
    """

    def __init__(self, block_kind="rsa", placement="010", levels=3,
                 base_channels=8, attention_embed=False, iterations=800,
                 batch_size=4, lr=1e-3, weight_decay=1e-5,
                 crop_size=D.DEFAULT_CROP, lesion_rate=D.DEFAULT_RATE,
                 require_lesion=True, seed=0):
        self.block_kind = block_kind
        self.placement = placement
        self.levels = levels
        self.base_channels = base_channels
        self.attention_embed = attention_embed
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.crop_size = crop_size
        self.lesion_rate = lesion_rate
        self.require_lesion = require_lesion
        self.seed = seed

    def _samples(self, X, y):
        images = _as_volume_list(X, 4, "images")
        labels = _as_volume_list(y, 3, "labels")
        if len(images) != len(labels):
            raise ShapeMismatch(
                f"{len(images)} images against {len(labels)} labels")
        out = []
        for i, (img, lab) in enumerate(zip(images, labels)):
            if img.shape[1:] != lab.shape:
                raise ShapeMismatch(
                    f"sample {i}: image {img.shape} against label {lab.shape}")
            if not np.isin(lab, (0, 1)).all():
                raise NonBinary(f"sample {i}: labels must be 0/1")
            out.append(D.VolumeSample(
                image=T.from_numpy(img),
                label=T.from_numpy(lab),
                voxel_size=D.DEFAULT_VOXEL_SIZE,
                id=f"s{i:03d}"))
        return out

    def fit(self, X, y):
        samples = self._samples(X, y)
        config = N.UNetConfig(
            levels=self.levels, base_channels=self.base_channels,
            in_channels=samples[0].image.shape[0], out_classes=2,
            block_kind=self.block_kind, placement=self.placement,
            attention_embed=self.attention_embed)
        N.validate_config(config)
        self.config_ = config
        self.network_ = N.build_network(config, seed=self.seed)
        self.train_config_ = TR.TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, seed=self.seed,
            crop_size=tuple(self.crop_size), lesion_rate=self.lesion_rate,
            require_lesion=self.require_lesion)
        self.history_ = TR.train_loop(self.network_, samples,
                                      self.train_config_)
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        images = _as_volume_list(X, 4, "images")
        return np.stack([TR.predict_volume(self.network_, img)
                         for img in images])

    def score(self, X, y):
        """Voxel-average Dice of predictions against y."""
        check_is_fitted(self, "network_")
        labels = _as_volume_list(y, 3, "labels")
        preds = self.predict(X)
        pooled = M.Confusion()
        for p, lab in zip(preds, labels):
            pooled = pooled + M.confusion(p, lab)
        dice, _ = M.dice_iou(pooled)
        return dice
