import numpy as np
import pytest

from patchseg.container import MAGIC, load_arrays, load_matrix, save_arrays
from patchseg.errors import DataError, ShapeError


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.normal(size=(4, 5)),
        "b": np.arange(6, dtype=np.int64).reshape(2, 3),
        "c": rng.random(7).astype(np.float32),
        "scalar": np.array([3], dtype=np.int64),
    }
    path = tmp_path / "arrays.na"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_arrays(tmp_path / "nope.na")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.na"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(DataError, match="bad magic"):
        load_arrays(path)


def test_truncated_manifest(tmp_path):
    path = tmp_path / "trunc.na"
    path.write_bytes(MAGIC + (1000).to_bytes(8, "little") + b"{")
    with pytest.raises(DataError, match="truncated"):
        load_arrays(path)


def test_truncated_data(tmp_path):
    path = tmp_path / "short.na"
    save_arrays(path, {"x": np.ones((8, 8))})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(DataError, match="truncated data"):
        load_arrays(path)


def test_garbage_manifest_json(tmp_path):
    path = tmp_path / "garbage.na"
    body = b"not json at all"
    path.write_bytes(MAGIC + len(body).to_bytes(8, "little") + body)
    with pytest.raises(DataError, match="malformed header"):
        load_arrays(path)


def test_load_matrix_rank_check(tmp_path):
    path = tmp_path / "rank.na"
    save_arrays(path, {"features": np.zeros((2, 2, 2))})
    with pytest.raises(ShapeError, match="rank 2"):
        load_matrix(path, "features")


def test_load_matrix_missing_name(tmp_path):
    path = tmp_path / "named.na"
    save_arrays(path, {"other": np.zeros((2, 2))})
    with pytest.raises(DataError, match="'features'"):
        load_matrix(path, "features")
