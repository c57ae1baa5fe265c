import struct

import numpy as np
import pytest

from artcritic.checkpoint import MAGIC, decode_container, encode_container, read_container, write_container
from artcritic.errors import FormatError

BLOCKS = {
    "w": np.arange(12, dtype=np.float64).reshape(3, 4) / 7,
    "codes": np.array([1, 255, 16], dtype=np.uint8),
    "scalar": np.array(2.5),
}


def test_roundtrip(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, {"k": [1, 2], "name": "x"}, BLOCKS)
    meta, blocks = read_container(path)
    assert meta == {"k": [1, 2], "name": "x"}
    assert list(blocks) == list(BLOCKS)
    for k, v in BLOCKS.items():
        assert blocks[k].dtype == v.dtype and np.array_equal(blocks[k], v)
    assert not list(tmp_path.glob("*.tmp"))


def test_encoding_is_deterministic():
    assert encode_container({"b": 1, "a": 2}, BLOCKS) == encode_container({"a": 2, "b": 1}, BLOCKS)


def test_header_layout():
    buf = encode_container({}, {})
    assert buf[:8] == MAGIC
    assert struct.unpack("<I", buf[8:12]) == (1,)


@pytest.mark.parametrize("cut", [0, 5, 20, -1, -40])
def test_truncation_detected(cut):
    buf = encode_container({"a": 1}, BLOCKS)
    with pytest.raises(FormatError):
        decode_container(buf[:cut])


def test_corruption_detected():
    buf = bytearray(encode_container({"a": 1}, BLOCKS))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(FormatError, match="checksum"):
        decode_container(bytes(buf))


def test_bad_magic_and_version():
    buf = encode_container({}, BLOCKS)
    with pytest.raises(FormatError, match="magic"):
        decode_container(b"NOTARTCR" + buf[8:])
    with pytest.raises(FormatError, match="version"):
        decode_container(buf[:8] + struct.pack("<I", 9) + buf[12:])


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_container({}, {"x": np.zeros(3, dtype=np.int32)})
