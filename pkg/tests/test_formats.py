import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from momentflow import formats


@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4)])
def test_blob_round_trip(tmp_path, shape):
    a = np.random.default_rng(0).normal(size=shape)
    formats.write_blob(tmp_path / "a.ngfd", a)
    assert_array_equal(formats.read_blob(tmp_path / "a.ngfd"), a)


def test_blob_header_layout(tmp_path):
    formats.write_blob(tmp_path / "a.ngfd", np.arange(6.0).reshape(2, 3))
    raw = (tmp_path / "a.ngfd").read_bytes()
    assert raw[:4] == b"NGFD" and raw[4] == 1
    assert struct.unpack_from("<3Q", raw, 5) == (2, 2, 3)
    assert struct.unpack_from("<6d", raw, 29) == (0, 1, 2, 3, 4, 5)


def test_blob_rejects_corruption(tmp_path):
    p = tmp_path / "a.ngfd"
    formats.write_blob(p, np.ones(4))
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(formats.FormatError, match="magic"):
        formats.read_blob(p)
    p.write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(formats.FormatError, match="version"):
        formats.read_blob(p)
    p.write_bytes(raw[:-8])
    with pytest.raises(formats.FormatError, match="size"):
        formats.read_blob(p)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"w": np.arange(3.0), "s": np.array(2.5), "m": np.eye(2)}
    formats.write_checkpoint(tmp_path / "c", {"kind": "x"}, arrays)
    man, back = formats.read_checkpoint(tmp_path / "c")
    assert man["kind"] == "x"
    assert list(back) == ["w", "s", "m"]
    for k in arrays:
        assert_array_equal(back[k], arrays[k])
    raw = (tmp_path / "c").read_bytes()
    assert raw[:5] == b"NGCM1"
    (tmp_path / "c").write_bytes(raw + b"\0" * 8)
    with pytest.raises(formats.FormatError, match="trailing"):
        formats.read_checkpoint(tmp_path / "c")


def test_table_round_trip(tmp_path):
    x = np.linspace(0, 1, 4)
    formats.write_table(tmp_path / "t.txt", [x, x ** 2], ["x", "y"])
    header, data = formats.read_table(tmp_path / "t.txt")
    assert header == ["x", "y"]
    assert_array_equal(data[:, 1], x ** 2)
