from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from layerqe.checkpoint import MAGIC, decode_tensors, encode_tensors, expect_kind, load_tensors, save_tensors
from layerqe.errors import CheckpointError


def _tensors(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=4).astype(np.float32),
        "scalar": np.asarray(1.5, dtype=np.float32),
    }


def test_round_trip(rng: np.random.Generator, tmp_path: Path) -> None:
    tensors = _tensors(rng)
    path = save_tensors(tmp_path / "x.lqck", tensors, {"kind": "head", "note": "ü"})
    meta, loaded = load_tensors(path)
    assert meta == {"kind": "head", "note": "ü"}
    assert list(loaded) == ["w", "b", "scalar"]
    for name, value in tensors.items():
        np.testing.assert_array_equal(loaded[name], value)
        assert loaded[name].shape == value.shape


def test_float64_is_stored_as_float32() -> None:
    _, loaded = decode_tensors(encode_tensors({"x": np.array([1 / 3])}, {}))
    assert loaded["x"].dtype == np.float32
    assert loaded["x"][0] == np.float32(1 / 3)


@pytest.mark.parametrize("cut", [2, 8, 20, -1])
def test_truncated(rng: np.random.Generator, cut: int) -> None:
    data = encode_tensors(_tensors(rng), {"kind": "head"})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_tensors(data[:cut])


def test_trailing_bytes(rng: np.random.Generator) -> None:
    with pytest.raises(CheckpointError):
        decode_tensors(encode_tensors(_tensors(rng), {}) + b"\x00")


def test_bad_magic() -> None:
    with pytest.raises(CheckpointError, match="magic"):
        decode_tensors(b"PK\x03\x04" + bytes(20))


def test_bad_version() -> None:
    data = bytearray(encode_tensors({}, {}))
    data[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        decode_tensors(bytes(data))


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "absent.lqck")


def test_expect_kind() -> None:
    expect_kind({"kind": "lora"}, "lora", "x")
    with pytest.raises(CheckpointError, match="expected a transformer"):
        expect_kind({"kind": "lora"}, "transformer", "x")


def test_magic_prefix() -> None:
    assert encode_tensors({}, {}).startswith(MAGIC)
