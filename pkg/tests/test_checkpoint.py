import struct

import numpy as np
import pytest

from stcd import checkpoint as ck
from stcd.training import full_shapes


def _full():
    rng = np.random.default_rng(0)
    return ck.Checkpoint({k: rng.normal(size=s).astype(np.float32) for k, s in full_shapes().items()}, meta={"seed": 0})


def test_round_trip_is_bit_exact(tmp_path):
    c = _full()
    ck.save_checkpoint(tmp_path / "m.ckpt", c)
    back = ck.load_checkpoint(tmp_path / "m.ckpt", expected=full_shapes())
    assert back.meta == {"seed": 0}
    for k, v in c.tensors.items():
        assert back.tensors[k].dtype == np.float32
        assert np.array_equal(back.tensors[k], v)
    assert ck.encode_checkpoint(back) == (tmp_path / "m.ckpt").read_bytes()


def test_layout_header_for_warp_conv():
    assert ck.tensor_header("warp.conv1.w", (64, 80, 3, 3)) == (
        struct.pack("<I", 12) + b"warp.conv1.w" + struct.pack("<I", 4) + struct.pack("<4I", 64, 80, 3, 3)
    )
    data = ck.encode_checkpoint(ck.Checkpoint({"warp.conv1.w": np.zeros((64, 80, 3, 3), np.float32)}))
    assert data[:12] == b"STCD" + struct.pack("<II", 1, 1)
    assert len(data) == 12 + 4 + 12 + 4 + 16 + 4 * 64 * 80 * 9 + 8


def test_bad_magic():
    data = ck.encode_checkpoint(_full())
    with pytest.raises(ck.BadMagicError):
        ck.decode_checkpoint(b"XXXX" + data[4:])


def test_version_mismatch():
    data = bytearray(ck.encode_checkpoint(_full()))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(ck.VersionMismatchError):
        ck.decode_checkpoint(bytes(data))


@pytest.mark.parametrize("cut", [5, 13, 40, -9])
def test_truncation(cut):
    data = ck.encode_checkpoint(_full())
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.decode_checkpoint(data[:cut])


def test_checksum_detects_flipped_bit():
    data = bytearray(ck.encode_checkpoint(_full()))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(ck.ChecksumError):
        ck.decode_checkpoint(bytes(data))


def test_wrong_shape_names_tensor(tmp_path):
    c = _full()
    c.tensors["warp.conv1.w"] = np.zeros((64, 79, 3, 3), np.float32)
    ck.save_checkpoint(tmp_path / "m.ckpt", c)
    with pytest.raises(ck.TensorShapeError, match="warp.conv1.w"):
        ck.load_checkpoint(tmp_path / "m.ckpt", expected=full_shapes())
    del c.tensors["warp.conv1.w"]
    with pytest.raises(ck.TensorShapeError, match="lacks"):
        c.validate(full_shapes())
