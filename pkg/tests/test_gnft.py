import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fieldpolicy import gnft


def test_header_layout_is_bit_exact():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    raw = gnft.encode(arr)
    assert raw[:4] == b"GNFT"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert raw[8] == 1 and raw[9] == 2
    assert struct.unpack("<2Q", raw[10:26]) == (2, 3)
    assert raw[26:] == arr.astype("<f4").tobytes()


def test_float64_code():
    assert gnft.encode(np.zeros(3))[8] == 2


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip(arr):
    back = gnft.decode(gnft.encode(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_malformed_header_reports_path_and_offset(tmp_path):
    p = tmp_path / "bad.gnft"
    p.write_bytes(b"GNFX" + b"\0" * 10)
    with pytest.raises(gnft.GNFTError, match=r"bad\.gnft.*offset 0"):
        gnft.load(p)
    raw = bytearray(gnft.encode(np.zeros((2, 2), dtype=np.float32)))
    raw[8] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(gnft.GNFTError, match="offset 8"):
        gnft.load(p)
    p.write_bytes(gnft.encode(np.zeros((2, 2), dtype=np.float32))[:-3])
    with pytest.raises(gnft.GNFTError, match="offset"):
        gnft.load(p)


def test_rejects_integer_arrays():
    with pytest.raises(TypeError):
        gnft.encode(np.zeros(3, dtype=np.int32))
