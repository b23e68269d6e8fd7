import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from idegen.autodiff.rng import Rng
from idegen.checkpoint import (MAGIC, encode_checkpoint, decode_checkpoint, load_checkpoint, save_checkpoint)
from idegen.errors import CheckpointVersionError, ContractError, CorruptCheckpointError


def _tensors():
    r = Rng(0)
    return {"enc.w": r.normal((4, 3, 3, 3)).astype(np.float32), "enc.b": np.zeros(4, np.float32),
            "scalar": np.float32(2.5) * np.ones((), np.float32), "empty": np.zeros((0, 5), np.float32)}


def test_save_load_save_is_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _tensors(), {"kind": "x", "n": 3})
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.meta == {"kind": "x", "n": 3}
    for k, v in _tensors().items():
        assert ck.tensors[k].shape == v.shape and np.array_equal(ck.tensors[k], v)
    save_checkpoint(tmp_path / "b.ckpt", ck.tensors, ck.meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12).filter(lambda s: s != "__meta__"),
                       arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(-1e6, 1e6, width=32)), max_size=4))
def test_round_trip_property(tensors):
    ck = decode_checkpoint(encode_checkpoint(tensors))
    assert ck.tensors.keys() == tensors.keys()
    for k, v in tensors.items():
        assert np.array_equal(ck.tensors[k], v)


def test_flipped_payload_byte_is_detected():
    data = bytearray(encode_checkpoint(_tensors()))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))


def test_bad_magic_and_truncation():
    data = encode_checkpoint(_tensors())
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(b"NOTACKPT" + data[8:])
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(data[:10])


def test_unknown_version_rejected():
    data = bytearray(encode_checkpoint(_tensors()))
    data[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="99"):
        decode_checkpoint(bytes(data))


def test_name_collision_on_save():
    pairs = [("w", np.zeros(2, np.float32)), ("w", np.ones(2, np.float32))]
    with pytest.raises(ContractError, match="'w'"):
        encode_checkpoint(pairs)
    with pytest.raises(ContractError):
        encode_checkpoint({"__meta__": np.zeros(1, np.uint8)}, {"a": 1})


def test_header_layout():
    data = encode_checkpoint({})
    assert data[:8] == MAGIC and struct.unpack_from("<I", data, 8)[0] == 1
    assert len(data) == 8 + 4 + 4 + 4
