import struct

import numpy as np
import pytest

from ssvif import checkpoint as ck
from ssvif.errors import CheckpointError, DataError


def _tensors(rng):
    return {
        "a.weight": rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
        "a.bias": rng.standard_normal(2).astype(np.float32),
        "scalar": np.array(3.5, np.float32),
    }


def test_round_trip_is_bit_exact(tmp_path, rng):
    tensors = _tensors(rng)
    tensors["a.bias"][0] = np.float32(np.nan)
    meta = {"stage": 2, "note": "x = y"}
    ck.save_checkpoint(tensors, meta, tmp_path / "c.ckpt")
    back, meta_back = ck.load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
        assert back[k].shape == tensors[k].shape
    assert meta_back == {"stage": "2", "note": "x = y"}


def test_layout_header_is_little_endian(rng):
    buf = ck.dumps({"w": np.arange(3, dtype=np.float32)}, {})
    assert buf[:4] == b"SSVF"
    assert struct.unpack("<HI", buf[4:10]) == (1, 1)
    name_len = struct.unpack("<I", buf[10:14])[0]
    assert buf[14:14 + name_len] == b"w"
    rank, extent, tag = struct.unpack("<III", buf[15:27])
    assert (rank, extent, tag) == (1, 3, 0)
    assert np.frombuffer(buf[27:39], "<f4").tolist() == [0.0, 1.0, 2.0]


def test_bad_magic(rng):
    buf = bytearray(ck.dumps(_tensors(rng), {}))
    buf[0:4] = b"NOPE"
    with pytest.raises(CheckpointError, match="magic"):
        ck.loads(bytes(buf))


def test_bad_version(rng):
    buf = bytearray(ck.dumps(_tensors(rng), {}))
    buf[4:6] = struct.pack("<H", 9)
    with pytest.raises(CheckpointError, match="version"):
        ck.loads(bytes(buf))


@pytest.mark.parametrize("cut", [3, 12, 40, -5])
def test_truncation_is_reported(rng, cut):
    buf = ck.dumps(_tensors(rng), {"k": "v"})
    with pytest.raises(CheckpointError, match="truncated"):
        ck.loads(buf[:cut])


def test_trailing_bytes_are_rejected(rng):
    with pytest.raises(CheckpointError, match="trailing"):
        ck.loads(ck.dumps(_tensors(rng), {}) + b"\0")


def test_missing_file_and_error_family(tmp_path):
    with pytest.raises(CheckpointError):
        ck.load_checkpoint(tmp_path / "missing.ckpt")
    assert issubclass(CheckpointError, DataError)


def test_meta_must_fit_on_one_line():
    with pytest.raises(ValueError):
        ck.encode_meta({"k": "a\nb"})
