"""``EMMAVOL1`` multi-channel volume container.

Layout (little-endian)::

    b"EMMAVOL1"
    u32 version, u32 channel count C, 3 x u64 extents (D, H, W), 3 x f64 spacing (mm)
    u32-prefixed ASCII dtype tag, C x u32-prefixed UTF-8 channel names
    C*D*H*W raw values, channel-major
    u32 CRC32 over every byte after the magic

Cases are stored as channels ``flair, t1, t1ce, t2`` plus an optional
``label`` channel; confidence maps as one channel per class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .fileio import Reader, atomic_write_bytes, crc32, dtype_tag, finish, pack_str, tag_dtype
from .preprocessing.case import MODALITIES, VolumeCase

MAGIC = b"EMMAVOL1"
VERSION = 1


@dataclass
class VolumeContainer:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DimensionError(f"container data must be [C, D, H, W], got {self.data.shape}")
        if not self.channel_names:
            self.channel_names = tuple(f"c{i}" for i in range(self.data.shape[0]))
        if len(self.channel_names) != self.data.shape[0]:
            raise DimensionError(f"{len(self.channel_names)} channel names for "
                                 f"{self.data.shape[0]} channels")
        self.channel_names = tuple(self.channel_names)
        self.spacing = tuple(float(s) for s in self.spacing)

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.channel_names.index(name)]


def encode_volume(vol: VolumeContainer) -> bytes:
    tag = dtype_tag(vol.data.dtype)
    C, D, H, W = vol.data.shape
    body = struct.pack("<II3Q3d", VERSION, C, D, H, W, *vol.spacing) + pack_str(tag)
    body += b"".join(pack_str(n) for n in vol.channel_names)
    body += np.ascontiguousarray(vol.data).astype(tag_dtype(tag), copy=False).tobytes()
    return MAGIC + body + struct.pack("<I", crc32(body))


def decode_volume(data: bytes, what: str = "volume") -> VolumeContainer:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{what}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    r = Reader(data, what)
    r.take(len(MAGIC))
    start = r.pos
    version, C, D, H, W, *spacing = r.unpack("<II3Q3d")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    dt = tag_dtype(r.string())
    names = tuple(r.string() for _ in range(C))
    n = C * D * H * W
    arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(C, D, H, W).copy()
    finish(r, start)
    return VolumeContainer(arr, tuple(spacing), names)


def write_volume(path, vol: VolumeContainer) -> None:
    atomic_write_bytes(path, encode_volume(vol))


def read_volume(path) -> VolumeContainer:
    path = Path(path)
    return decode_volume(path.read_bytes(), what=f"volume {path.name}")


def case_to_container(case: VolumeCase) -> VolumeContainer:
    channels = [case.images.astype(np.float32)]
    names = list(MODALITIES)
    if case.labels is not None:
        channels.append(case.labels[None].astype(np.float32))
        names.append("label")
    return VolumeContainer(np.concatenate(channels), case.spacing, tuple(names))


def container_to_case(vol: VolumeContainer, case_id: str = "case") -> VolumeCase:
    missing = [m for m in MODALITIES if m not in vol.channel_names]
    if missing:
        raise FormatError(f"{case_id}: volume lacks modality channels {missing}")
    images = np.stack([vol.channel(m) for m in MODALITIES])
    labels = vol.channel("label").astype(np.uint8) if "label" in vol.channel_names else None
    return VolumeCase(images, labels, vol.spacing, case_id)


def read_case(path) -> VolumeCase:
    return container_to_case(read_volume(path), Path(path).name.split(".")[0])


def write_case(path, case: VolumeCase) -> None:
    write_volume(path, case_to_container(case))
