import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedwca.checkpoint import (
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    load_model,
    manifest,
    save_checkpoint,
)
from fedwca.errors import CheckpointFormatError

from conftest import small_model


def hand_encoded() -> bytes:
    """One 2x2 tensor named 'w', written byte by byte from the format description."""
    out = b"FWCA" + bytes([1]) + struct.pack("<I", 1)
    out += struct.pack("<H", 1) + b"w" + bytes([2]) + struct.pack("<II", 2, 2)
    out += struct.pack("<4f", 1.0, -2.0, 0.5, 3.25)
    return out


def test_decode_hand_encoded_bytes():
    t = decode_tensors(hand_encoded())
    np.testing.assert_array_equal(t["w"], [[1.0, -2.0], [0.5, 3.25]])


def test_encode_matches_hand_encoding():
    assert encode_tensors({"w": np.array([[1.0, -2.0], [0.5, 3.25]])}) == hand_encoded()


@pytest.mark.parametrize("cut", [0, 3, 8, 12, 20, 30])
def test_truncated_files_rejected(cut):
    with pytest.raises(CheckpointFormatError):
        decode_tensors(hand_encoded()[:cut])


def test_bad_magic_version_and_trailing_bytes():
    data = hand_encoded()
    with pytest.raises(CheckpointFormatError):
        decode_tensors(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        decode_tensors(data[:4] + bytes([2]) + data[5:])
    with pytest.raises(CheckpointFormatError):
        decode_tensors(data + b"\0")


def test_model_round_trip_is_byte_identical(tmp_path):
    m = small_model(hidden=(6, 5))
    a, b = tmp_path / "a.fwca", tmp_path / "b.fwca"
    save_checkpoint(a, m)
    restored = load_model(a)
    save_checkpoint(b, restored)
    assert a.read_bytes() == b.read_bytes()
    assert restored.classifier.frozen
    assert list(load_checkpoint(a)) == list(m.tensors())


def test_manifest_checksums_survive_round_trip(tmp_path):
    m = small_model()
    save_checkpoint(tmp_path / "a.fwca", m)
    save_checkpoint(tmp_path / "b.fwca", load_model(tmp_path / "a.fwca"))
    ma, mb = manifest(tmp_path / "a.fwca"), manifest(tmp_path / "b.fwca")
    assert ma == mb
    assert [i.name for i in ma] == list(m.tensors())
    assert ma[0].shape == (4, 5)


@given(st.dictionaries(
    st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12),
    st.lists(st.integers(1, 4), min_size=0, max_size=3),
    min_size=1, max_size=4,
))
def test_arbitrary_tensors_round_trip(shapes):
    rng = np.random.default_rng(0)
    tensors = {name: rng.normal(size=tuple(shape)).astype(np.float32) for name, shape in shapes.items()}
    back = decode_tensors(encode_tensors(tensors))
    assert list(back) == list(tensors)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])
