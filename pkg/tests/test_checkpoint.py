import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
import hypothesis.extra.numpy as nph

from ivlab.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
arrays = nph.arrays(np.float64, nph.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip(store):
    back = decode(encode(store, {"stage": "x", "step": 3}))
    assert sorted(back.params) == sorted(store)
    for k, v in store.items():
        assert back.params[k].shape == v.shape
        assert np.array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    assert back.meta == {"stage": "x", "step": "3"}


def test_file_round_trip_and_empty_store(tmp_path):
    ck = load_checkpoint(save_checkpoint({}, None, tmp_path / "sub" / "e.ck"))
    assert ck.params == {} and ck.meta == {}
    raw = (tmp_path / "sub" / "e.ck").read_bytes()
    assert raw[:4] == b"IVCK" and struct.unpack("<II", raw[4:12]) == (1, 0)


def test_layout_is_little_endian_f32():
    raw = encode({"a": np.array([1.5, -2.0])})
    assert raw[12:14] == struct.pack("<H", 1) and raw[14:15] == b"a"
    assert raw[15:17] == bytes([0, 1]) and struct.unpack("<I", raw[17:21]) == (2,)
    assert np.frombuffer(raw[21:29], "<f4").tolist() == [1.5, -2.0]


def test_encoding_is_order_independent():
    a = {"x": np.ones(2), "y": np.zeros(1)}
    assert encode(a, {"b": 1, "a": 2}) == encode(dict(reversed(list(a.items()))), {"a": 2, "b": 1})


def test_bad_magic():
    raw = bytearray(encode({"a": np.ones(1)}))
    raw[0] = ord("X")
    with pytest.raises(CheckpointError, match="magic"):
        decode(bytes(raw))


def test_version_mismatch():
    raw = bytearray(encode({}))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(raw))


def test_truncated_and_trailing():
    raw = encode({"a": np.ones(3)}, {"k": "v"})
    for cut in (3, 10, 20, len(raw) - 1):
        with pytest.raises(CheckpointError):
            decode(raw[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(raw + b"\0")


def test_duplicate_names():
    one = encode({"a": np.ones(1)})
    entry = one[12:-4]
    raw = one[:4] + struct.pack("<II", 1, 2) + entry + entry + struct.pack("<I", 0)
    with pytest.raises(CheckpointError, match="duplicate"):
        decode(raw)


def test_bad_dtype_code():
    raw = bytearray(encode({"a": np.ones(1)}))
    raw[15] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        decode(bytes(raw))


def test_meta_must_be_line_safe():
    with pytest.raises(CheckpointError):
        encode({}, {"k": "two\nlines"})
