from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from safechance import nn, store, tensorfile


def test_golden_header_bytes():
    buf = tensorfile.encode(np.zeros((2, 3), np.float32))
    assert buf[:18] == b"CTSR\x01\x00\x00\x00\x00\x02\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(buf) == 18 + 24
    assert tensorfile.encode(np.array([7], np.uint8)) == b"CTSR\x01\x00\x00\x00\x01\x01\x01\x00\x00\x00\x07"


@given(hnp.arrays(st.sampled_from([np.float32, np.uint8]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_round_trip_bit_exact(a):
    out = tensorfile.decode(tensorfile.encode(a))
    assert out.dtype == a.dtype and out.shape == a.shape
    assert out.tobytes() == a.tobytes()


def test_file_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    tensorfile.write(tmp_path / "sub" / "a.ctsr", a)
    assert tensorfile.read(tmp_path / "sub" / "a.ctsr").tobytes() == a.tobytes()


def test_rejects_unknown_version():
    buf = bytearray(tensorfile.encode(np.zeros(2, np.uint8)))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(tensorfile.TensorFileError, match="version 2"):
        tensorfile.decode(bytes(buf))


def test_rejects_bad_magic_and_length():
    buf = tensorfile.encode(np.zeros(4, np.float32))
    with pytest.raises(tensorfile.TensorFileError, match="magic"):
        tensorfile.decode(b"XXXX" + buf[4:])
    with pytest.raises(tensorfile.TensorFileError, match="payload"):
        tensorfile.decode(buf[:-1])


def test_rejects_other_dtypes():
    with pytest.raises(tensorfile.TensorFileError):
        tensorfile.encode(np.zeros(2))


def test_git_hash_matches_git():
    # `printf hello | git hash-object --stdin`
    assert store.git_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"
    assert store.git_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_json_round_trip(tmp_path):
    obj = {"b": [0.1, 1e-300, 2.5], "a": {"x": None, "y": True}}
    store.write_json(tmp_path / "o.json", obj)
    text = (tmp_path / "o.json").read_text()
    assert store.read_json(tmp_path / "o.json") == obj
    store.write_json(tmp_path / "p.json", json.loads(text))
    assert (tmp_path / "p.json").read_bytes() == text.encode()


def test_write_json_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        store.write_json(blocker / "x.json", {})


def test_net_round_trip(tmp_path):
    net = nn.mlp([5, 4, 2], np.random.default_rng(0), out="softmax")
    store.quantize(net)
    store.save_net(tmp_path / "net", net, {"kind": "test"})
    back, meta = store.load_net(tmp_path / "net")
    assert meta == {"kind": "test"}
    assert back.activations == net.activations
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.params(), net.params()))


def test_tree_hash_order_independent(tmp_path):
    for name in "ab":
        (tmp_path / name).write_text(name)
    paths = [tmp_path / "a", tmp_path / "b"]
    assert store.tree_hash(paths) == store.tree_hash(paths[::-1])
