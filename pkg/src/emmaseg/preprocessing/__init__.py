"""Normalisation pipelines, brain masking, patch sampling and augmentation."""

from .case import MODALITIES, VolumeCase, brain_mask
from .normalization import (
    PERCENTILES,
    VERSIONS,
    BiasFieldCorrector,
    IntensityNormalizer,
    LandmarkModel,
    LandmarkStandardizer,
    NormalizationSpec,
    ZScoreNormalizer,
    apply_normalization,
    case_landmarks,
    nyul_apply,
    nyul_train,
    piecewise_linear,
    polynomial_bias_correct,
    zscore_normalize,
)
from .sampling import (
    STRATEGIES,
    PatchBatch,
    PatchSampler,
    augment,
    crop_padded,
    indices_to_labels,
    labels_to_indices,
    pathway_crops,
    reflect,
    sample_patch,
    stack_batches,
)

__all__ = [
    "MODALITIES", "PERCENTILES", "STRATEGIES", "VERSIONS",
    "BiasFieldCorrector", "IntensityNormalizer", "LandmarkModel", "LandmarkStandardizer",
    "NormalizationSpec", "PatchBatch", "PatchSampler", "VolumeCase", "ZScoreNormalizer",
    "apply_normalization", "augment", "brain_mask", "case_landmarks", "crop_padded",
    "indices_to_labels", "labels_to_indices", "nyul_apply", "nyul_train", "pathway_crops",
    "piecewise_linear", "polynomial_bias_correct", "reflect", "sample_patch", "stack_batches",
    "zscore_normalize",
]
