"""``EMMACKPT`` checkpoint files.

Layout (all integers little-endian)::

    b"EMMACKPT"  u32 version
    u32 record count
    per record: u32 name length, UTF-8 name,
                u32 tag length, ASCII dtype tag,
                u32 rank, rank x u64 extents, raw values
    u32 CRC32 of every byte from the record count to the last record

Parameters, batch-norm running statistics and a ``__meta__`` record (UTF-8
JSON stored as ``u1``) describing the architecture and training setup.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff.tensor import Tensor
from ..errors import CheckpointError, FormatError
from ..fileio import Reader, atomic_write_bytes, crc32, dtype_tag, finish, pack_str, tag_dtype
from .network import NetworkInstance
from .spec import build_spec

MAGIC = b"EMMACKPT"
VERSION = 1
META = "__meta__"


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    tag = dtype_tag(arr.dtype)
    le = arr.astype(tag_dtype(tag), copy=False)
    head = pack_str(name) + pack_str(tag) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + le.tobytes()


def encode_records(records: dict[str, np.ndarray]) -> bytes:
    body = struct.pack("<I", len(records)) + b"".join(_record(k, v) for k, v in records.items())
    return MAGIC + struct.pack("<I", VERSION) + body + struct.pack("<I", crc32(body))


def decode_records(data: bytes, what: str = "checkpoint") -> dict[str, np.ndarray]:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{what}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    r = Reader(data, what)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    start = r.pos
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        name = r.string()
        dt = tag_dtype(r.string())
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    finish(r, start)
    return out


def instance_records(instance: NetworkInstance) -> dict[str, np.ndarray]:
    spec = instance.spec
    meta = {
        "spec_id": spec.spec_id,
        "n_classes": spec.n_classes,
        "width_scale": spec.width_scale,
        **instance.meta,
    }
    records = {META: np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name in sorted(instance.params):
        records[name] = instance.params[name].data
    for name in sorted(instance.buffers):
        records[name] = instance.buffers[name]
    return records


def save_checkpoint(instance: NetworkInstance, path) -> None:
    atomic_write_bytes(path, encode_records(instance_records(instance)))


def load_checkpoint(path) -> NetworkInstance:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    records = decode_records(path.read_bytes(), what=f"checkpoint {path.name}")
    if META not in records:
        raise CheckpointError(f"checkpoint {path.name} has no {META} record")
    meta = json.loads(records.pop(META).tobytes().decode("utf-8"))
    spec = build_spec(meta.pop("spec_id"), meta.pop("n_classes"), meta.pop("width_scale"))
    params, buffers = {}, {}
    for name, arr in records.items():
        if name.endswith((".running_mean", ".running_var")):
            buffers[name] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True, name=name)
    instance = NetworkInstance(spec, params, buffers, meta)
    instance.check()
    return instance
