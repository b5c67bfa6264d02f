"""Input checks shared by estimators and module functions."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError

BRATS_LABELS = (0, 1, 2, 4)


def check_extents_match(*arrays, names=None) -> tuple[int, ...]:
    """All arrays share their trailing three (spatial) extents."""
    names = names or [f"array{i}" for i in range(len(arrays))]
    ref = arrays[0].shape[-3:]
    for name, a in zip(names, arrays):
        if a.shape[-3:] != ref:
            detail = ", ".join(f"{n}={x.shape[-3:]}" for n, x in zip(names, arrays))
            raise DimensionError(f"spatial extents differ: {detail}")
    return ref


def check_label_volume(labels, allowed=BRATS_LABELS) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise DimensionError(f"label volume must be 3-D, got shape {labels.shape}")
    present = np.unique(labels)
    bad = sorted(set(present.tolist()) - set(allowed))
    if bad:
        raise DataError(f"unexpected label values {bad}; allowed {list(allowed)}")
    return labels


def check_probability_map(probs, atol: float = 1e-5) -> np.ndarray:
    """``[K, D, H, W]`` array whose class axis is a probability simplex."""
    probs = np.asarray(probs)
    if probs.ndim != 4:
        raise DimensionError(f"confidence map must be [K,D,H,W], got shape {probs.shape}")
    if probs.shape[0] < 2:
        raise DimensionError(f"confidence map needs K >= 2 classes, got {probs.shape[0]}")
    if np.any(probs < -atol) or np.any(probs > 1 + atol):
        raise DataError("confidence values outside [0, 1]")
    err = np.abs(probs.sum(axis=0, dtype=np.float64) - 1.0).max()
    if err > atol:
        raise DataError(f"class probabilities do not sum to 1 (max deviation {err:.2e})")
    return probs
