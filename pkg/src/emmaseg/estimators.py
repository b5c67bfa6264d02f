"""scikit-learn style wrapper around one trainable segmentation network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .ensemble import TilingSpec, argmax_segment, predict_full_volume
from .metrics import dice, merge_regions
from .preprocessing.case import VolumeCase
from .preprocessing.normalization import NormalizationSpec, apply_normalization
from .training import train_network


class SegmentationNetwork(BaseEstimator):
    """``fit`` takes a list of labelled :class:`VolumeCase`; ``predict`` returns a label volume."""

    def __init__(self, architecture: str = "unet/sum_skip", width_scale: float = 1.0,
                 loss: str = "cross_entropy", optimizer: str = "adam", learning_rate: float = 1e-3,
                 iterations: int = 1000, batch_size: int = 2, patch_output: int | None = None,
                 sampling: str = "uniform_per_label", normalization: str = "v1_zscore",
                 seed: int = 0, precision: int = 32, tile: int = 64):
        self.architecture = architecture
        self.width_scale = width_scale
        self.loss = loss
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.patch_output = patch_output
        self.sampling = sampling
        self.normalization = normalization
        self.seed = seed
        self.precision = precision
        self.tile = tile

    def _config(self) -> RunConfig:
        sampling = {"strategy": self.sampling}
        if self.patch_output is not None:
            sampling["patch_output"] = int(self.patch_output)
        return RunConfig.from_dict({
            "seed": int(self.seed),
            "architecture": self.architecture,
            "width_scale": float(self.width_scale),
            "precision": int(self.precision),
            "loss": {"kind": self.loss},
            "optimizer": {"algorithm": self.optimizer,
                          "hyperparameters": {"lr": float(self.learning_rate)}},
            "sampling": sampling,
            "normalization": {"version": self.normalization},
            "batch_size": int(self.batch_size),
            "iterations": int(self.iterations),
            "data": {"cases": ["<in-memory>"]},
            "output": {"checkpoint": "<unused>"},
        })

    def fit(self, cases: list[VolumeCase], y=None):
        result = train_network(self._config(), list(cases), save=False)
        self.instance_ = result.instance
        self.losses_ = np.asarray(result.losses)
        self.normalization_ = NormalizationSpec.from_json(result.instance.meta["normalization"])
        return self

    def predict_proba(self, case: VolumeCase) -> np.ndarray:
        check_is_fitted(self, "instance_")
        normed = apply_normalization(case, self.normalization_)
        return predict_full_volume(self.instance_, normed, TilingSpec(self.tile)).probs

    def predict(self, case: VolumeCase) -> np.ndarray:
        return argmax_segment(self.predict_proba(case))

    def score(self, cases: list[VolumeCase], y=None) -> float:
        """Mean whole-tumour Dice over labelled cases."""
        return float(np.mean([dice(merge_regions(self.predict(c)).whole, merge_regions(c.labels).whole)
                              for c in cases]))
