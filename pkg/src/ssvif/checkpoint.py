"""Binary checkpoint format.

Layout, all integers little-endian::

    "SSVF"                      magic, 4 bytes
    u16 version                 currently 1
    u32 count
    count x {
        u32 name_len, name (UTF-8)
        u32 rank, rank x u32 extents
        u32 dtype tag            0 = float32
    }
    payloads                    raw float32 data of each tensor, manifest order
    u32 meta_len, meta          UTF-8 ``key = value`` lines

Loading a saved file reproduces every tensor bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError

MAGIC = b"SSVF"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4")}


def encode_meta(meta: dict) -> bytes:
    lines = []
    for key, value in meta.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"meta entry {key!r} cannot be stored on one line")
        lines.append(f"{key} = {text}\n")
    return "".join(lines).encode("utf-8")


def decode_meta(blob: bytes) -> dict[str, str]:
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        meta[key] = value
    return meta


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<I", 0))
        payloads.append(np.ascontiguousarray(arr).tobytes())
    meta_blob = encode_meta(meta or {})
    return b"".join(parts + payloads + [struct.pack("<I", len(meta_blob)), meta_blob])


def loads(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated while reading {what} at byte {pos} (file has {len(buf)} bytes)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    manifest = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        (tag,) = struct.unpack("<I", take(4, "dtype tag"))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype tag {tag}")
        manifest.append((name, shape, DTYPE_TAGS[tag]))
    tensors = {}
    for name, shape, dtype in manifest:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float32)
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = decode_meta(take(meta_len, "meta block"))
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after meta block")
    return tensors, meta


def save_checkpoint(tensors: dict[str, np.ndarray], meta: dict, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(dumps(tensors, meta))
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return loads(buf, str(path))
