"""scikit-learn style wrappers around the networks and the map builders."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentPolicy
from .metrics import segmentation_report
from .models.classifier import ClassifierConfig, assemble_input, build_classifier
from .models.nasunet import NASUNetConfig, build_nasunet
from .posinfo import build_position_maps
from .segpost import segment_postprocess
from .synthdata import Sample
from .trainer import (ClassificationTask, Phase, Schedule, SegmentationTask, predict, run_schedule)
from .validation import check_image_mask_stack, check_images, check_labels, check_masks


def _samples(images, masks, labels=None):
    labels = labels if labels is not None else np.zeros(len(images), dtype=int)
    return [Sample(image=i, mask=m, label=int(l), id=f"x{k}") for k, (i, m, l) in
            enumerate(zip(images, masks, labels))]


class NASUNetSegmenter(BaseEstimator):
    """Tendon segmentation. ``X`` is ``(n, h, w)`` 8-bit images, ``y`` binary masks."""

    def __init__(self, levels: int = 3, repeats: int = 2, base_filters: int = 32, epochs: int = 8,
                 learning_rate: float = 1e-3, batch_size: int = 8, augment: bool = True,
                 threshold: float = 0.4, random_state: int = 0):
        self.levels = levels
        self.repeats = repeats
        self.base_filters = base_filters
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.augment = augment
        self.threshold = threshold
        self.random_state = random_state

    def _task(self, train: bool) -> SegmentationTask:
        policy = AugmentPolicy.for_task("segmentation") if (self.augment and train) else None
        return SegmentationTask(policy, self.threshold)

    def fit(self, X, y):
        images = check_images(X)
        masks = check_masks(y, images.shape)
        cfg = NASUNetConfig(levels=self.levels, repeats=self.repeats, base_filters=self.base_filters,
                            input_size=images.shape[1:])
        self.model_ = build_nasunet(cfg, self.random_state)
        schedule = Schedule((Phase("target", self.epochs, {"all": self.learning_rate}),), self.batch_size)
        self.log_ = run_schedule(self.model_, schedule, {"target": _samples(images, masks)},
                                 self.random_state, self._task(True)).log
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X)
        dummy = np.zeros_like(images)
        return predict(self.model_, self._task(False), _samples(images, dummy))[:, 0]

    def predict(self, X) -> np.ndarray:
        return np.stack([segment_postprocess(p, self.threshold, warn=False) for p in self.predict_proba(X)])

    def score(self, X, y) -> float:
        """Mean per-image DSC."""
        masks = check_masks(y)
        return float(segmentation_report(list(masks), list(self.predict(X))).dsc)


class PositionMapTransformer(TransformerMixin, BaseEstimator):
    """Masks ``(n, h, w)`` to stacked ``(n, 2, h, w)`` radius/angle maps."""

    def fit(self, X, y=None):
        check_masks(X, name="X")
        return self

    def transform(self, X) -> np.ndarray:
        masks = check_masks(X, name="X")
        return np.stack([build_position_maps(m).stack() for m in masks])


class InputAssembler(TransformerMixin, BaseEstimator):
    """``(n, 2, h, w)`` image/mask stacks to ``(n, 3, h, w)`` network inputs for one scenario."""

    def __init__(self, scenario: str = "PI"):
        self.scenario = scenario

    def fit(self, X, y=None):
        check_image_mask_stack(X)
        return self

    def transform(self, X) -> np.ndarray:
        images, masks = check_image_mask_stack(X)
        out = []
        for img, m in zip(images, masks):
            pm = build_position_maps(m) if self.scenario == "PI" else None
            out.append(assemble_input(img, self.scenario, m, pm)[0])
        return np.stack(out)


class TendinopathyClassifier(ClassifierMixin, BaseEstimator):
    """Binary tendinopathy recognition from ``(n, 2, h, w)`` image/mask stacks."""

    def __init__(self, scenario: str = "PI", levels: int = 2, repeats: int = 1, base_filters: int = 8,
                 width: float = 0.25, dropout: float = 0.2, top_activation: str = "linear", epochs: int = 20,
                 learning_rate: float = 1e-3, batch_size: int = 8, augment: bool = False, random_state: int = 0):
        self.scenario = scenario
        self.levels = levels
        self.repeats = repeats
        self.base_filters = base_filters
        self.width = width
        self.dropout = dropout
        self.top_activation = top_activation
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.augment = augment
        self.random_state = random_state

    def _task(self, train: bool) -> ClassificationTask:
        policy = AugmentPolicy.for_task("classification") if (self.augment and train) else None
        return ClassificationTask(self.scenario, policy)

    def fit(self, X, y):
        images, masks = check_image_mask_stack(X)
        labels = check_labels(y, len(images))
        cfg = ClassifierConfig(NASUNetConfig(levels=self.levels, repeats=self.repeats,
                                             base_filters=self.base_filters, input_size=images.shape[1:]),
                               width=self.width, dropout=self.dropout, scenario=self.scenario,
                               top_activation=self.top_activation)
        self.model_ = build_classifier(cfg, self.random_state)
        self.classes_ = np.array([0, 1])
        schedule = Schedule((Phase("target", self.epochs, {"all": self.learning_rate}),), self.batch_size)
        self.log_ = run_schedule(self.model_, schedule, {"target": _samples(images, masks, labels)},
                                 self.random_state, self._task(True)).log
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images, masks = check_image_mask_stack(X)
        return predict(self.model_, self._task(False), _samples(images, masks)).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
