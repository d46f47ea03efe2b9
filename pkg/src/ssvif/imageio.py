"""Netpbm codecs, BT.601 colour conversion and paired-dataset handling.

Dataset layout on disk::

    <root>/vis/<id>.ppm      visible RGB, binary P6
    <root>/ir/<id>.pgm       infrared, binary P5
    <root>/labels/<id>.pgm   optional class-index map (raw indices, not scaled)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, DimensionError, ParseError
from .ops import channel_mix
from .tensor import Tensor

# full-range BT.601, rows are (Y, Cb, Cr)
_Y = np.array([0.299, 0.587, 0.114])
RGB_TO_YCBCR = np.stack([
    _Y,
    0.564 * (np.array([0.0, 0.0, 1.0]) - _Y),
    0.713 * (np.array([1.0, 0.0, 0.0]) - _Y),
])
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


# -- netpbm ---------------------------------------------------------------------

def _read_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse ``magic width height maxval`` and return (width, height, payload offset)."""
    if buf[:2] != magic:
        raise ParseError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0, path)
    pos = 2
    fields = []
    starts = []
    while len(fields) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header: expected an integer", start, path)
        fields.append(int(buf[start:pos]))
        starts.append(start)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("malformed header: missing whitespace before payload", pos, path)
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"non-positive image extent {width}x{height}", starts[0], path)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} (only 255)", starts[2], path)
    return width, height, pos


def _decode(buf: bytes, magic: bytes, channels: int, path=None) -> np.ndarray:
    width, height, offset = _read_header(buf, magic, path)
    need = width * height * channels
    if len(buf) - offset < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(buf) - offset}", len(buf), path)
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return raw.reshape(height, width, channels)


def decode_ppm(buf: bytes, path=None) -> np.ndarray:
    """Bytes of a P6 file -> uint8 array [H, W, 3]."""
    return _decode(buf, b"P6", 3, path)


def decode_pgm(buf: bytes, path=None) -> np.ndarray:
    """Bytes of a P5 file -> uint8 array [H, W]."""
    return _decode(buf, b"P5", 1, path)[..., 0]


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc


def load_ppm(path) -> np.ndarray:
    """Load a binary PPM as float32 [3, H, W] in [0, 1]."""
    return decode_ppm(_read_bytes(path), path).transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def load_pgm(path) -> np.ndarray:
    """Load a binary PGM as float32 [1, H, W] in [0, 1]."""
    return decode_pgm(_read_bytes(path), path)[None].astype(np.float32) / np.float32(255)


def load_label_pgm(path) -> np.ndarray:
    """Load a class-index PGM as an int64 map [H, W] (raw byte values)."""
    return decode_pgm(_read_bytes(path), path).astype(np.int64)


def to_bytes(values) -> np.ndarray:
    """Quantise [0,1] floats to uint8, rounding halves away from zero."""
    arr = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if arr.size and (np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("pixel values must lie in [0, 1]; clamp before saving")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(rgb_u8: np.ndarray) -> bytes:
    h, w, _ = rgb_u8.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb_u8).tobytes()


def encode_pgm(gray_u8: np.ndarray) -> bytes:
    h, w = gray_u8.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray_u8).tobytes()


def _write(path, payload: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror or exc}") from exc


def save_ppm(img, path) -> None:
    """Write a [3, H, W] image with values in [0, 1] as binary PPM."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"save_ppm expects [3,H,W], got {arr.shape}")
    _write(path, encode_ppm(to_bytes(arr).transpose(1, 2, 0)))


def save_pgm(img, path) -> None:
    """Write a [1, H, W] or [H, W] image with values in [0, 1] as binary PGM."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DimensionError(f"save_pgm expects one channel, got {arr.shape}")
        arr = arr[0]
    _write(path, encode_pgm(to_bytes(arr)))


def save_label_pgm(classes: np.ndarray, path) -> None:
    classes = np.asarray(classes)
    if classes.min(initial=0) < 0 or classes.max(initial=0) > 255:
        raise ContractError("class indices must fit in one byte")
    _write(path, encode_pgm(classes.astype(np.uint8)))


# -- colour ---------------------------------------------------------------------

def rgb_to_ycbcr(img):
    """Full-range BT.601 RGB -> YCbCr on [3,H,W] / [N,3,H,W]; differentiable for Tensors."""
    if isinstance(img, Tensor):
        return channel_mix(img, RGB_TO_YCBCR, YCBCR_OFFSET)
    arr = np.asarray(img)
    ax = arr.ndim - 3
    out = np.tensordot(RGB_TO_YCBCR, np.moveaxis(arr, ax, 0), axes=1)
    return np.moveaxis(out, 0, ax) + YCBCR_OFFSET.reshape((3, 1, 1))


def ycbcr_to_rgb(img):
    if isinstance(img, Tensor):
        return channel_mix(img, YCBCR_TO_RGB, -YCBCR_TO_RGB @ YCBCR_OFFSET)
    arr = np.asarray(img)
    ax = arr.ndim - 3
    shifted = np.moveaxis(arr, ax, 0) - YCBCR_OFFSET.reshape((3,) + (1,) * (arr.ndim - 1))
    return np.moveaxis(np.tensordot(YCBCR_TO_RGB, shifted, axes=1), 0, ax)


def luminance(img):
    """BT.601 Y channel of [3,H,W] / [N,3,H,W] as a one-channel image."""
    if isinstance(img, Tensor):
        return channel_mix(img, _Y[None])
    arr = np.asarray(img)
    ax = arr.ndim - 3
    return np.expand_dims(np.tensordot(_Y, np.moveaxis(arr, ax, 0), axes=1), ax)


# -- paired dataset -----------------------------------------------------------------

@dataclass
class ImagePair:
    """Aligned visible / infrared images, both [3, H, W] float32 in [0, 1]."""

    vis: np.ndarray
    ir: np.ndarray
    label: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        if self.vis.shape != self.ir.shape or self.vis.shape[0] != 3:
            raise DimensionError(f"pair {self.id!r}: vis {self.vis.shape} and ir {self.ir.shape} differ")
        if self.label is not None and self.label.shape != self.vis.shape[1:]:
            raise DimensionError(f"pair {self.id!r}: label {self.label.shape} vs image {self.vis.shape[1:]}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.vis.shape[1], self.vis.shape[2]


def replicate_ir(ir: np.ndarray) -> np.ndarray:
    """[1,H,W] infrared -> three identical channels."""
    return np.repeat(ir, 3, axis=0)


def list_ids(root) -> list[str]:
    vis_dir = Path(root) / "vis"
    if not vis_dir.is_dir():
        raise DataError(f"dataset root {root} has no vis/ directory")
    return sorted(p.stem for p in vis_dir.glob("*.ppm"))


def load_pair(root, pair_id: str, with_label: bool = True) -> ImagePair:
    root = Path(root)
    vis = load_ppm(root / "vis" / f"{pair_id}.ppm")
    ir = replicate_ir(load_pgm(root / "ir" / f"{pair_id}.pgm"))
    label = None
    label_path = root / "labels" / f"{pair_id}.pgm"
    if with_label and label_path.exists():
        label = load_label_pgm(label_path)
    return ImagePair(vis=vis, ir=ir, label=label, id=pair_id)


def load_dataset(root, ids: list[str] | None = None) -> list[ImagePair]:
    ids = list_ids(root) if ids is None else ids
    if not ids:
        raise DataError(f"dataset root {root} contains no pairs")
    return [load_pair(root, i) for i in ids]


def random_crop_pair(pair: ImagePair, size: int, rng: np.random.Generator) -> ImagePair:
    """Apply one random ``size`` x ``size`` window to vis, ir and label."""
    h, w = pair.hw
    if size > min(h, w) or size < 1:
        raise ContractError(f"crop {size} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop_pair(pair, top, left, size)


def center_crop_pair(pair: ImagePair, size: int) -> ImagePair:
    h, w = pair.hw
    if size > min(h, w) or size < 1:
        raise ContractError(f"crop {size} does not fit image {h}x{w}")
    return crop_pair(pair, (h - size) // 2, (w - size) // 2, size)


def crop_pair(pair: ImagePair, top: int, left: int, size: int) -> ImagePair:
    win = np.s_[top:top + size, left:left + size]
    return ImagePair(
        vis=pair.vis[:, win[0], win[1]],
        ir=pair.ir[:, win[0], win[1]],
        label=None if pair.label is None else pair.label[win],
        id=pair.id,
    )


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str] = field(default_factory=list)
    seed: int = 0


def split_dataset(ids, seed: int, test=()) -> DatasetSplit:
    """Seeded shuffle, then 90% train / 10% validation."""
    ids = list(ids)
    if len(ids) < 10:
        raise ContractError(f"need at least 10 ids to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = (len(ids) * 9) // 10
    shuffled = [ids[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train], val=shuffled[n_train:], test=list(test), seed=seed)

