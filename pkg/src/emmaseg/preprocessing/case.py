"""Multi-modal MR volume bundle and brain masking."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import DataError, DimensionError
from ..validation import check_label_volume

MODALITIES = ("flair", "t1", "t1ce", "t2")


@dataclass
class VolumeCase:
    """Registered FLAIR/T1/T1ce/T2 volumes (``images[4, D, H, W]``) plus optional labels."""

    images: np.ndarray
    labels: np.ndarray | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = "case"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[0] != len(MODALITIES):
            raise DimensionError(f"images must be [4, D, H, W] ({'/'.join(MODALITIES)}), "
                                 f"got {self.images.shape}")
        if self.labels is not None:
            self.labels = check_label_volume(self.labels)
            if self.labels.shape != self.images.shape[1:]:
                raise DimensionError(f"labels {self.labels.shape} do not match images "
                                     f"{self.images.shape[1:]}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def modality(self, name: str) -> np.ndarray:
        return self.images[MODALITIES.index(name)]

    def with_images(self, images: np.ndarray) -> "VolumeCase":
        return replace(self, images=images)


def brain_mask(case: VolumeCase) -> np.ndarray:
    """Voxels where any modality is non-zero (inputs are skull-stripped)."""
    mask = np.any(case.images != 0, axis=0)
    if not mask.any():
        raise DataError(f"{case.case_id}: empty brain mask (all modalities are zero)")
    return mask
