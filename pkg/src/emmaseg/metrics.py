"""Region overlap and surface-distance metrics for tumour segmentations."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .errors import DimensionError
from .preprocessing.sampling import labels_to_indices
from .validation import check_extents_match, check_label_volume

REGIONS = ("enhancing", "whole", "core")
REGION_LABELS = {"whole": (1, 2, 4), "core": (1, 4), "enhancing": (4,)}
REGION_ABBREV = {"enhancing": "Enh.", "whole": "Whole", "core": "Core"}
HAUSDORFF_SENTINEL = 373.13
_FACE_STRUCTURE = np.zeros((3, 3, 3), dtype=bool)
_FACE_STRUCTURE[1, 1, :] = _FACE_STRUCTURE[1, :, 1] = _FACE_STRUCTURE[:, 1, 1] = True


@dataclass
class RegionSet:
    whole: np.ndarray
    core: np.ndarray
    enhancing: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __getitem__(self, region: str) -> np.ndarray:
        return getattr(self, region)


def merge_regions(labels, spacing=(1.0, 1.0, 1.0)) -> RegionSet:
    labels = check_label_volume(labels)
    return RegionSet(np.isin(labels, REGION_LABELS["whole"]),
                     np.isin(labels, REGION_LABELS["core"]),
                     labels == 4, tuple(float(s) for s in spacing))


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred, ref = np.asarray(pred, dtype=bool), np.asarray(ref, dtype=bool)
    check_extents_match(pred, ref, names=("prediction", "reference"))
    return pred, ref


def dice(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / total


def sensitivity(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    n_ref = int(ref.sum())
    if n_ref == 0:
        return 1.0
    return int(np.logical_and(pred, ref).sum()) / n_ref


def surface(mask) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (array border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, _FACE_STRUCTURE, border_value=0)


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    d = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(q / 100.0 * d.size))
    return float(d[k - 1])


def directed_surface_distances(src, dst, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance in mm from each surface voxel of ``src`` to the nearest surface voxel of ``dst``."""
    spacing = np.asarray(spacing, dtype=np.float64)
    s_src, s_dst = surface(src), surface(dst)
    _, idx = distance_transform_edt(~s_dst, sampling=spacing, return_indices=True)
    pts = np.argwhere(s_src)
    nearest = idx[(slice(None), *pts.T)].T
    # recomputed from indices so the result is independent of the transform's rounding
    return np.sqrt((((pts - nearest) * spacing) ** 2).sum(axis=1))


def hausdorff95_flagged(pred, ref, spacing=(1.0, 1.0, 1.0)) -> tuple[float, bool]:
    """``(distance_mm, is_sentinel)``; any empty mask yields the sentinel."""
    pred, ref = _pair(pred, ref)
    if len(spacing) != pred.ndim:
        raise DimensionError(f"spacing {tuple(spacing)} does not match a {pred.ndim}-D mask")
    if not pred.any() or not ref.any():
        return HAUSDORFF_SENTINEL, True
    a = nearest_rank(directed_surface_distances(pred, ref, spacing))
    b = nearest_rank(directed_surface_distances(ref, pred, spacing))
    return max(a, b), False


def hausdorff95(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    return hausdorff95_flagged(pred, ref, spacing)[0]


@dataclass
class RegionScore:
    dsc: float
    sensitivity: float
    hd95: float
    hd95_sentinel: bool


@dataclass
class ClassHistogram:
    bin_edges: list[float]
    correct: list[int]
    incorrect: list[int]
    mean_entropy: float


@dataclass
class EvaluationReport:
    case_id: str
    regions: dict[str, RegionScore]
    diagnostics: dict[str, ClassHistogram] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"case_id": self.case_id,
                "regions": {r: asdict(s) for r, s in self.regions.items()},
                "diagnostics": {k: asdict(v) for k, v in self.diagnostics.items()}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        """Plain-text table: DSC, Sensitivity, Hausdorff95, each over Enh./Whole/Core."""
        metrics = (("DSC", "dsc"), ("Sensitivity", "sensitivity"), ("Hausdorff95", "hd95"))
        head = ["Case"] + [f"{m} {REGION_ABBREV[r]}" for m, _ in metrics for r in REGIONS]
        row = [self.case_id]
        for _, key in metrics:
            for r in REGIONS:
                v = getattr(self.regions[r], key)
                row.append(f"{v:.4f}" if key != "hd95" else f"{v:.2f}")
        widths = [max(len(h), len(v)) for h, v in zip(head, row)]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(cells, widths)) for cells in (head, row))


def confidence_diagnostics(probs, ref_indices, bins: int = 10) -> dict[str, ClassHistogram]:
    """Per-class histograms of predicted confidence, split by correct and incorrect voxels.

    ``probs`` is ``[K, D, H, W]``; ``ref_indices`` holds class indices.  Class
    ``k`` collects voxels predicted as ``k``; the binned value is ``probs[k]``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ref = np.asarray(ref_indices)
    if probs.shape[1:] != ref.shape:
        raise DimensionError(f"map extents {probs.shape[1:]} differ from reference {ref.shape}")
    pred = np.argmax(probs, axis=0)
    top = np.take_along_axis(probs, pred[None], axis=0)[0]
    entropy = -(probs * np.log(np.clip(probs, 1e-12, None))).sum(axis=0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for k in range(probs.shape[0]):
        sel = pred == k
        ok = sel & (pred == ref)
        bad = sel & (pred != ref)
        out[f"class{k}"] = ClassHistogram(
            edges.tolist(),
            np.histogram(top[ok], edges)[0].tolist(),
            np.histogram(top[bad], edges)[0].tolist(),
            float(entropy[sel].mean()) if sel.any() else 0.0)
    return out


def evaluate(pred_labels, ref_labels, spacing=(1.0, 1.0, 1.0), case_id: str = "case",
             probs=None) -> EvaluationReport:
    pred_r = merge_regions(pred_labels, spacing)
    ref_r = merge_regions(ref_labels, spacing)
    scores = {}
    for r in REGIONS:
        hd, flag = hausdorff95_flagged(pred_r[r], ref_r[r], spacing)
        scores[r] = RegionScore(dice(pred_r[r], ref_r[r]), sensitivity(pred_r[r], ref_r[r]), hd, flag)
    diag = {}
    if probs is not None:
        diag = confidence_diagnostics(probs, labels_to_indices(ref_labels))
    return EvaluationReport(case_id, scores, diag)
