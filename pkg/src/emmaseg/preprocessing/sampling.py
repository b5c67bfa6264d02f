"""Class-balanced patch extraction and reflection augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..architectures.spec import NetworkSpec
from ..autodiff.nn import downsample_average
from ..autodiff.tensor import Tensor
from ..errors import ConfigError, DataError, UsageError
from ..validation import BRATS_LABELS
from .case import VolumeCase, brain_mask

logger = logging.getLogger(__name__)

STRATEGIES = ("healthy_tumour_5050", "uniform_per_label")
LABEL_TO_INDEX = np.zeros(max(BRATS_LABELS) + 1, dtype=np.int64)
LABEL_TO_INDEX[list(BRATS_LABELS)] = np.arange(len(BRATS_LABELS))
INDEX_TO_LABEL = np.asarray(BRATS_LABELS, dtype=np.uint8)


def labels_to_indices(labels: np.ndarray) -> np.ndarray:
    return LABEL_TO_INDEX[np.asarray(labels, dtype=np.int64)]


def indices_to_labels(indices: np.ndarray) -> np.ndarray:
    return INDEX_TO_LABEL[np.asarray(indices)]


@dataclass
class PatchBatch:
    """Per-pathway inputs, a class-index target on the output grid, and provenance."""

    inputs: dict[str, np.ndarray]
    target: np.ndarray
    centers: list[tuple[int, int, int]] = field(default_factory=list)
    groups: list[str] = field(default_factory=list)


def crop_padded(arr: np.ndarray, start, size) -> np.ndarray:
    """Spatial crop of the last three axes; out-of-volume voxels are zero."""
    lead = arr.shape[:-3]
    out = np.zeros(lead + tuple(size), dtype=arr.dtype)
    src, dst = [], []
    for n, s, k in zip(arr.shape[-3:], start, size):
        lo, hi = max(s, 0), min(s + k, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
    return out


def pathway_crops(images: np.ndarray, spec: NetworkSpec, center, output_extents) -> dict[str, np.ndarray]:
    """Inputs for every pathway so that the network output covers the region
    of ``output_extents`` starting at ``center - output_extents // 2``."""
    out_start = [c - o // 2 for c, o in zip(center, output_extents)]
    crops = {}
    for p in spec.pathways:
        region = [o + p.factor * p.margin for o in output_extents]
        start = [s - p.factor * p.margin // 2 for s in out_start]
        patch = crop_padded(images, start, region)
        if p.factor > 1:
            patch = downsample_average(Tensor(patch), p.factor).data
        crops[p.name] = patch
    return crops


def _groups(case: VolumeCase, strategy: str, include_background: bool) -> dict[str, np.ndarray]:
    mask = brain_mask(case)
    labels = case.labels
    if strategy == "healthy_tumour_5050":
        return {"healthy": np.flatnonzero(mask & (labels == 0)),
                "tumour": np.flatnonzero(labels > 0)}
    wanted = BRATS_LABELS if include_background else BRATS_LABELS[1:]
    return {f"label{v}": np.flatnonzero((labels == v) & mask) for v in wanted}


class PatchSampler:
    """Draws patch centres per strategy; caches voxel index lists per case."""

    def __init__(self, spec: NetworkSpec, strategy: str = "uniform_per_label",
                 output_extents=None, include_background: bool = True):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {strategy!r}; choose from {STRATEGIES}")
        self.spec = spec
        self.strategy = strategy
        out = spec.train_output if output_extents is None else output_extents
        out = (int(out),) * 3 if np.isscalar(out) else tuple(int(v) for v in out)
        spec.input_extents(out)  # rejects extents off the output granularity
        self.output_extents = out
        self.include_background = include_background
        self._cache: dict[int, tuple[VolumeCase, dict[str, np.ndarray]]] = {}

    def groups(self, case: VolumeCase) -> dict[str, np.ndarray]:
        hit = self._cache.get(id(case))
        if hit is None or hit[0] is not case:
            if case.labels is None:
                raise UsageError(f"{case.case_id}: patch sampling needs a label volume")
            groups = _groups(case, self.strategy, self.include_background)
            empty = [k for k, v in groups.items() if v.size == 0]
            if empty:
                logger.warning("%s: no voxels for %s; redistributing their probability",
                               case.case_id, empty)
            groups = {k: v for k, v in groups.items() if v.size}
            if not groups:
                raise DataError(f"{case.case_id}: no voxels available for sampling")
            hit = self._cache[id(case)] = (case, groups)
        return hit[1]

    def draw_center(self, case: VolumeCase, rng: np.random.Generator) -> tuple[tuple[int, int, int], str]:
        groups = self.groups(case)
        names = list(groups)
        name = names[int(rng.integers(len(names)))]
        flat = groups[name][int(rng.integers(groups[name].size))]
        return tuple(int(v) for v in np.unravel_index(flat, case.extents)), name

    def sample(self, case: VolumeCase, rng: np.random.Generator) -> PatchBatch:
        center, group = self.draw_center(case, rng)
        inputs = pathway_crops(case.images, self.spec, center, self.output_extents)
        start = [c - o // 2 for c, o in zip(center, self.output_extents)]
        target = labels_to_indices(crop_padded(case.labels, start, self.output_extents))
        return PatchBatch(inputs, target, [center], [group])


def sample_patch(case: VolumeCase, spec: NetworkSpec, strategy: str, rng: np.random.Generator,
                 output_extents=None, include_background: bool = True) -> PatchBatch:
    return PatchSampler(spec, strategy, output_extents, include_background).sample(case, rng)


def stack_batches(batches: list[PatchBatch]) -> PatchBatch:
    keys = batches[0].inputs.keys()
    return PatchBatch({k: np.stack([b.inputs[k] for b in batches]) for k in keys},
                      np.stack([b.target for b in batches]),
                      [c for b in batches for c in b.centers],
                      [g for b in batches for g in b.groups])


def reflect(batch: PatchBatch, axes) -> PatchBatch:
    """Mirror every pathway input and the target along the given spatial axes (0..2)."""
    axes = tuple(int(a) for a in axes)
    if not axes:
        return batch
    spatial = tuple(a - 3 for a in axes)
    inputs = {k: np.ascontiguousarray(np.flip(v, axis=spatial)) for k, v in batch.inputs.items()}
    return replace(batch, inputs=inputs, target=np.ascontiguousarray(np.flip(batch.target, axis=spatial)))


def augment(batch: PatchBatch, flags=(True, True, True), rng: np.random.Generator | None = None) -> PatchBatch:
    """Reflect along each enabled axis with probability 1/2."""
    if rng is None:
        rng = np.random.default_rng()
    axes = [a for a, on in enumerate(flags) if on and rng.random() < 0.5]
    return reflect(batch, axes)
