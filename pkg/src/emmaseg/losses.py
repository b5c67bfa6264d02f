"""Training objectives over per-voxel class probabilities.

All losses take ``probs`` shaped ``[K, D, H, W]`` or ``[N, K, D, H, W]``
(already softmax-normalised) and an integer class-index target with the
class axis removed.  The soft overlap losses also accept a one-hot target
of the same shape as ``probs``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff.nn import channel_axis
from .autodiff.tensor import Tensor, crop, log, mul, tsum
from .errors import ConfigError, UsageError

LOG_CLAMP = 1e-12
SMOOTH = 1.0
LOSS_KINDS = ("cross_entropy", "soft_dice", "soft_iou")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross_entropy"
    class_weights: tuple[float, ...] | None = None
    foreground_only: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; choose from {LOSS_KINDS}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if np.any(w < 0) or not np.any(w > 0):
                raise ConfigError("class weights must be non-negative with at least one > 0")
            object.__setattr__(self, "class_weights", tuple(float(v) for v in w))

    def __call__(self, probs: Tensor, target: np.ndarray) -> Tensor:
        return compute_loss(self, probs, target)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32, axis: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise UsageError(f"target labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, axis)


def _onehot_target(probs: Tensor, target) -> np.ndarray:
    target = np.asarray(target)
    if target.shape == probs.shape:
        return target.astype(probs.dtype, copy=False)
    ca = channel_axis(probs.ndim)
    expected = probs.shape[:ca] + probs.shape[ca + 1:]
    if target.shape != expected:
        raise UsageError(f"target shape {target.shape} does not match probabilities {probs.shape}")
    return one_hot(target, probs.shape[ca], dtype=probs.dtype, axis=ca)


def cross_entropy_loss(probs: Tensor, target, weights: Sequence[float] | None = None) -> Tensor:
    """Mean over voxels of ``-w[c] * log(p[c])`` at each voxel's true class ``c``."""
    onehot = _onehot_target(probs, target)
    ca = channel_axis(probs.ndim)
    K = probs.shape[ca]
    if weights is not None:
        w = np.asarray(weights, dtype=probs.dtype)
        if w.shape != (K,):
            raise UsageError(f"expected {K} class weights, got {w.shape}")
        shape = [1] * probs.ndim
        shape[ca] = K
        onehot = onehot * w.reshape(shape)
    n_vox = probs.size // K
    return tsum(mul(log(probs, LOG_CLAMP), -onehot / n_vox))


def _overlap_sums(probs: Tensor, target):
    g = _onehot_target(probs, target)
    ca = channel_axis(probs.ndim)
    axes = tuple(i for i in range(probs.ndim) if i != ca)
    inter = tsum(mul(probs, g), axis=axes)
    psum = tsum(probs, axis=axes)
    gsum = g.sum(axis=axes)
    return inter, psum, gsum


def _class_mean(scores: Tensor, foreground_only: bool) -> Tensor:
    if foreground_only:
        scores = crop(scores, (slice(1, None),))
    return 1.0 - scores.mean()


def soft_dice_loss(probs: Tensor, target, smooth: float = SMOOTH,
                   foreground_only: bool = False) -> Tensor:
    """``1 - mean_k (2 sum(p g) + s) / (sum(p) + sum(g) + s)``."""
    inter, psum, gsum = _overlap_sums(probs, target)
    score = (2.0 * inter + smooth) / (psum + (gsum + smooth))
    return _class_mean(score, foreground_only)


def soft_iou_loss(probs: Tensor, target, smooth: float = SMOOTH,
                  foreground_only: bool = False) -> Tensor:
    """``1 - mean_k (sum(p g) + s) / (sum(p) + sum(g) - sum(p g) + s)``."""
    inter, psum, gsum = _overlap_sums(probs, target)
    score = (inter + smooth) / (psum + (gsum + smooth) - inter)
    return _class_mean(score, foreground_only)


def compute_loss(spec: LossSpec, probs: Tensor, target) -> Tensor:
    if spec.kind == "cross_entropy":
        return cross_entropy_loss(probs, target, spec.class_weights)
    if spec.kind == "soft_dice":
        return soft_dice_loss(probs, target, foreground_only=spec.foreground_only)
    return soft_iou_loss(probs, target, foreground_only=spec.foreground_only)
