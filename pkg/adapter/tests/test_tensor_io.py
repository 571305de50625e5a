"""Tensor file format: bit-exact round trips and strict rejection of damage."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from pixlog import PixlogError, read_tensor, write_tensor
from pixlog.tensor import MAGIC


@pytest.mark.parametrize("rank", [1, 2, 3, 4])
@pytest.mark.parametrize("dtype", [np.float32, np.uint8])
def test_round_trip_bit_exact(tmp_path, rank, dtype):
    rng = np.random.default_rng(rank)
    shape = tuple(rng.integers(1, 6, rank))
    if dtype is np.float32:
        arr = rng.random(shape, dtype=np.float32)
    else:
        arr = rng.integers(0, 256, shape, dtype=np.uint8)
    path = tmp_path / "t.imt1"
    write_tensor(path, arr)
    again = read_tensor(path)
    assert again.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(again, arr)
    write_tensor(tmp_path / "u.imt1", again)
    assert (tmp_path / "u.imt1").read_bytes() == path.read_bytes()


def test_rejects_unsupported_dtype_and_rank(tmp_path):
    with pytest.raises(PixlogError, match="dtype"):
        write_tensor(tmp_path / "t.imt1", np.zeros((2, 2), np.float64))
    with pytest.raises(PixlogError, match="rank"):
        write_tensor(tmp_path / "t.imt1", np.zeros((1, 1, 1, 1, 1), np.float32))
    with pytest.raises(PixlogError, match="rank"):
        write_tensor(tmp_path / "t.imt1", np.float32(1.0))


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.imt1"
    write_tensor(path, np.zeros((2, 2), np.float32))
    blob = path.read_bytes()
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(PixlogError, match="magic"):
        read_tensor(path)


def test_read_rejects_truncation_and_trailing_bytes(tmp_path):
    path = tmp_path / "t.imt1"
    write_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(PixlogError, match="payload"):
        read_tensor(path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(PixlogError, match="payload"):
        read_tensor(path)
    path.write_bytes(blob[:6])
    with pytest.raises(PixlogError, match="truncated"):
        read_tensor(path)


def test_read_rejects_bad_rank_and_dtype_code(tmp_path):
    path = tmp_path / "t.imt1"
    payload = np.zeros(4, np.float32).tobytes()
    path.write_bytes(MAGIC + struct.pack("<I1II", 5, 4, 1) + payload)
    with pytest.raises(PixlogError, match="rank"):
        read_tensor(path)
    path.write_bytes(MAGIC + struct.pack("<I1II", 1, 4, 9) + payload)
    with pytest.raises(PixlogError, match="dtype code"):
        read_tensor(path)


def test_missing_file(tmp_path):
    with pytest.raises(PixlogError, match="missing"):
        read_tensor(tmp_path / "absent.imt1")
