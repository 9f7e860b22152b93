import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from e2caps import tensorio
from e2caps.tensorio import TensorFormatError


def test_layout_by_hand():
    buf = tensorio.encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert buf[:4] == b"E2TS"
    assert struct.unpack("<HH", buf[4:8]) == (1, 2)
    assert struct.unpack("<2Q", buf[8:24]) == (1, 3)
    assert np.frombuffer(buf[24:], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert len(buf) == 24 + 12


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements={"allow_nan": False}))
def test_round_trip(arr):
    out, used = tensorio.decode(tensorio.encode(arr))
    assert used == len(tensorio.encode(arr))
    assert out.shape == arr.shape and out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_file_round_trip(tmp_path, rng):
    arr = rng.standard_normal((2, 3, 4)).astype(np.float32)
    tensorio.save(tmp_path / "a.e2ts", arr)
    np.testing.assert_array_equal(tensorio.load(tmp_path / "a.e2ts"), arr)


def test_stream_reads_consecutive_tensors():
    a, b = np.arange(3, dtype=np.float32), np.ones((2, 2), dtype=np.float32)
    s = io.BytesIO(tensorio.encode(a) + tensorio.encode(b))
    np.testing.assert_array_equal(tensorio.read_from(s), a)
    np.testing.assert_array_equal(tensorio.read_from(s), b)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
    lambda b: b[:-2],
    lambda b: b[:10],
])
def test_malformed_rejected(mutate):
    good = tensorio.encode(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(TensorFormatError):
        tensorio.decode(mutate(good))


def test_trailing_bytes_rejected(tmp_path):
    (tmp_path / "x").write_bytes(tensorio.encode(np.zeros(2)) + b"\0")
    with pytest.raises(TensorFormatError):
        tensorio.load(tmp_path / "x")
