"""Full-volume inference and uniform averaging of member confidence maps."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .architectures.checkpoint import load_checkpoint
from .architectures.network import NetworkInstance, forward
from .architectures.spec import SPEC_IDS, NetworkSpec, receptive_field
from .errors import CheckpointError, ConfigError, DimensionError
from .preprocessing.case import VolumeCase
from .preprocessing.normalization import VERSIONS, NormalizationSpec, apply_normalization
from .preprocessing.sampling import INDEX_TO_LABEL, crop_padded, pathway_crops
from .validation import BRATS_LABELS


@dataclass
class ConfidenceMap:
    probs: np.ndarray
    member_id: str = ""
    normalization: str = ""

    @property
    def n_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]


@dataclass(frozen=True)
class TilingSpec:
    """``tile`` bounds the per-axis output extent of one forward pass;
    ``margin`` (same-padded networks only) defaults to half the receptive
    field, capped at a quarter of the tile."""

    tile: int = 64
    margin: int | None = None


@dataclass(frozen=True)
class Tile:
    in_start: tuple[int, int, int]
    in_size: tuple[int, int, int]
    src: tuple[slice, slice, slice]
    dst: tuple[slice, slice, slice]


def _round_up(n: int, g: int) -> int:
    return -(-n // g) * g


def _same_padded_axis(n: int, tile: int, margin: int, g: int):
    if n <= tile:
        return [(0, _round_up(n, g), 0, 0, n)]
    interior = tile - 2 * margin
    out = []
    for s in range(0, n, interior):
        k = min(interior, n - s)
        out.append((s - margin, tile, margin, s, k))
    return out


def _valid_axis(n: int, tile: int, g: int):
    size = min(_round_up(n, g), max(g, tile // g * g))
    return [(s, size, 0, s, min(size, n - s)) for s in range(0, n, size)]


def tile_plan(spec: NetworkSpec, extents, tiling: TilingSpec | None = None) -> list[Tile]:
    tiling = tiling or TilingSpec()
    g = spec.granularity
    extents = tuple(int(n) for n in extents)
    if min(extents) < g:
        raise DimensionError(f"{spec.spec_id}: volume {extents} is smaller than the minimum "
                             f"tile extent {g}")
    if spec.same_padded:
        tile = tiling.tile // g * g
        if tile < g:
            raise ConfigError(f"tile {tiling.tile} is below the granularity {g} of {spec.spec_id}")
        rf = max(max(v) for v in receptive_field(spec).values())
        margin = min(rf // 2, tile // 4) if tiling.margin is None else int(tiling.margin)
        if tile - 2 * margin < 1:
            raise ConfigError(f"margin {margin} leaves no interior in tile {tile}")
        axes = [_same_padded_axis(n, tile, margin, g) for n in extents]
    else:
        axes = [_valid_axis(n, tiling.tile, g) for n in extents]
    tiles = []
    for parts in itertools.product(*axes):
        tiles.append(Tile(tuple(p[0] for p in parts), tuple(p[1] for p in parts),
                          tuple(slice(p[2], p[2] + p[4]) for p in parts),
                          tuple(slice(p[3], p[3] + p[4]) for p in parts)))
    return tiles


def coverage_map(spec: NetworkSpec, extents, tiling: TilingSpec | None = None) -> np.ndarray:
    """How many tiles write each voxel; all ones for a valid plan."""
    count = np.zeros(tuple(extents), dtype=np.int64)
    for t in tile_plan(spec, extents, tiling):
        count[t.dst] += 1
    return count


def _tile_inputs(images: np.ndarray, spec: NetworkSpec, t: Tile) -> dict[str, np.ndarray]:
    if spec.same_padded:
        return {spec.pathways[0].name: crop_padded(images, t.in_start, t.in_size)[None]}
    center = [s + o // 2 for s, o in zip(t.in_start, t.in_size)]
    return {k: v[None] for k, v in pathway_crops(images, spec, center, t.in_size).items()}


def predict_full_volume(instance: NetworkInstance, case: VolumeCase | np.ndarray,
                        tiling: TilingSpec | None = None, member_id: str = "",
                        normalization: str = "") -> ConfidenceMap:
    """Dense class probabilities for an already-normalised case."""
    images = case.images if isinstance(case, VolumeCase) else np.asarray(case)
    spec = instance.spec
    if images.ndim != 4 or images.shape[0] != spec.in_channels:
        raise DimensionError(f"{spec.spec_id}: expected [{spec.in_channels}, D, H, W] images, "
                             f"got {images.shape}")
    extents = images.shape[1:]
    images = images.astype(instance.dtype, copy=False)
    probs = np.zeros((spec.n_classes,) + extents, dtype=np.float64)
    for t in tile_plan(spec, extents, tiling):
        out = forward(instance, _tile_inputs(images, spec, t), training=False).data[0]
        probs[(slice(None), *t.dst)] = out[(slice(None), *t.src)]
    return ConfidenceMap(probs, member_id or spec.spec_id, normalization)


def average_confidences(maps: list[ConfidenceMap]) -> ConfidenceMap:
    """Voxelwise mean with uniform weights, summed in list order in float64."""
    if not maps:
        raise DimensionError("cannot average an empty list of confidence maps")
    ref = maps[0].probs.shape
    bad = [f"{i}:{m.member_id or '?'}{m.probs.shape}" for i, m in enumerate(maps) if m.probs.shape != ref]
    if bad:
        raise DimensionError(f"confidence maps disagree with {ref}: {', '.join(bad)}")
    acc = np.zeros(ref, dtype=np.float64)
    for m in maps:
        acc += m.probs
    acc /= len(maps)
    return ConfidenceMap(acc, "emma", "+".join(sorted({m.normalization for m in maps if m.normalization})))


def argmax_segment(cmap: ConfidenceMap | np.ndarray, label_values=BRATS_LABELS) -> np.ndarray:
    """Per-voxel argmax; on ties the first (lowest-label) class wins."""
    probs = cmap.probs if isinstance(cmap, ConfidenceMap) else np.asarray(cmap)
    values = np.asarray(label_values, dtype=np.uint8)
    if len(values) != probs.shape[0]:
        raise DimensionError(f"{len(values)} label values for {probs.shape[0]} classes")
    if np.any(np.diff(values.astype(np.int64)) <= 0):
        raise ConfigError("label values must be strictly increasing")
    return values[np.argmax(probs, axis=0)]


@dataclass
class EnsembleMember:
    checkpoint: Path
    spec_id: str
    normalization: NormalizationSpec

    def to_json(self, base: Path | None = None) -> dict:
        path = Path(self.checkpoint)
        if base is not None:
            try:
                path = path.resolve().relative_to(base.resolve())
            except ValueError:
                pass
        return {"checkpoint": str(path), "spec_id": self.spec_id,
                "normalization": self.normalization.to_json()}


@dataclass
class EnsembleManifest:
    members: list[EnsembleMember]
    n_classes: int = len(BRATS_LABELS)
    tiling: TilingSpec = field(default_factory=TilingSpec)

    def __post_init__(self):
        if not self.members:
            raise ConfigError("ensemble manifest lists no members")

    @classmethod
    def from_json(cls, doc, base: Path | None = None, **kw) -> "EnsembleManifest":
        if not isinstance(doc, list):
            raise ConfigError("ensemble manifest must be a JSON array of members")
        members = []
        for i, entry in enumerate(doc):
            if not isinstance(entry, dict) or set(entry) != {"checkpoint", "spec_id", "normalization"}:
                raise ConfigError(f"manifest entry {i} must have exactly the keys "
                                  "checkpoint, spec_id, normalization")
            if entry["spec_id"] not in SPEC_IDS:
                raise ConfigError(f"manifest entry {i}: unknown spec_id {entry['spec_id']!r}")
            path = Path(entry["checkpoint"])
            if base is not None and not path.is_absolute():
                path = base / path
            members.append(EnsembleMember(path, entry["spec_id"],
                                          NormalizationSpec.from_json(entry["normalization"])))
        return cls(members, **kw)

    @classmethod
    def load(cls, path, **kw) -> "EnsembleManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest {path.name}: invalid JSON ({e})") from None
        return cls.from_json(doc, path.parent, **kw)

    def to_json(self, base: Path | None = None) -> list[dict]:
        return [m.to_json(base) for m in self.members]

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(path.parent), indent=2))


def full_configuration() -> list[tuple[str, str]]:
    """Every (architecture, normalisation version) pair: 7 x 3 = 21 members."""
    return [(s, v) for s in SPEC_IDS for v in VERSIONS]


def load_member(member: EnsembleMember, n_classes: int) -> NetworkInstance:
    instance = load_checkpoint(member.checkpoint)
    if instance.spec.spec_id != member.spec_id:
        raise CheckpointError(f"checkpoint {Path(member.checkpoint).name} holds "
                              f"{instance.spec.spec_id}, manifest says {member.spec_id}")
    if instance.spec.n_classes != n_classes:
        raise CheckpointError(f"checkpoint {Path(member.checkpoint).name} predicts "
                              f"{instance.spec.n_classes} classes, ensemble expects {n_classes}")
    return instance


def run_emma(manifest: EnsembleManifest, case: VolumeCase) -> tuple[ConfidenceMap, np.ndarray]:
    """Normalise per member, predict, average in manifest order, label."""
    instances = [load_member(m, manifest.n_classes) for m in manifest.members]
    normalized: dict[str, VolumeCase] = {}
    maps = []
    for member, instance in zip(manifest.members, instances):
        key = json.dumps(member.normalization.to_json(), sort_keys=True)
        if key not in normalized:
            normalized[key] = apply_normalization(case, member.normalization)
        maps.append(predict_full_volume(instance, normalized[key], manifest.tiling,
                                        member_id=str(member.checkpoint),
                                        normalization=member.normalization.version))
    emma = average_confidences(maps)
    return emma, argmax_segment(emma)


class EMMAEnsemble(BaseEstimator):
    """Estimator wrapper: ``members`` is a list of ``(NetworkInstance, NormalizationSpec)``."""

    def __init__(self, members=None, tile: int = 64):
        self.members = members
        self.tile = tile

    def fit(self, X=None, y=None):
        if not self.members:
            raise ConfigError("EMMAEnsemble needs at least one member")
        ks = {inst.spec.n_classes for inst, _ in self.members}
        if len(ks) != 1:
            raise ConfigError(f"members disagree on class count: {sorted(ks)}")
        self.n_classes_ = ks.pop()
        return self

    def member_maps(self, case: VolumeCase) -> list[ConfidenceMap]:
        tiling = TilingSpec(self.tile)
        return [predict_full_volume(inst, apply_normalization(case, norm), tiling,
                                    normalization=norm.version)
                for inst, norm in self.members]

    def predict_proba(self, case: VolumeCase) -> np.ndarray:
        self.fit()
        return average_confidences(self.member_maps(case)).probs

    def predict(self, case: VolumeCase) -> np.ndarray:
        return argmax_segment(self.predict_proba(case), INDEX_TO_LABEL[:self.n_classes_])


def shared_argmax_agrees(maps: list[np.ndarray], averaged: np.ndarray) -> bool:
    """Where all members share an argmax, the average has the same argmax."""
    tops = np.stack([np.argmax(m, axis=0) for m in maps])
    agree = np.all(tops == tops[0], axis=0)
    return bool(np.all(np.argmax(averaged, axis=0)[agree] == tops[0][agree]))

