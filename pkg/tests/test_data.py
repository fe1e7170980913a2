import numpy as np
import pytest

from clmae.data import Dataset, DatasetError, gen_synthetic, pixel_nn_accuracy


def test_deterministic_bytes():
    a = gen_synthetic(3, 4, 16, 16, 3, seed=7).to_bytes()
    assert a == gen_synthetic(3, 4, 16, 16, 3, seed=7).to_bytes()
    assert a != gen_synthetic(3, 4, 16, 16, 3, seed=8).to_bytes()


def test_count_field_and_length():
    ds = gen_synthetic(10, 16, 8, 8, 1, seed=0)
    raw = ds.to_bytes()
    assert int.from_bytes(raw[8:12], "little") == 160
    assert len(raw) == 19 + 160 * (2 + 64)


def test_roundtrip(tmp_path):
    ds = gen_synthetic(4, 3, 8, 16, 3, seed=2)
    ds.save(tmp_path / "d.clmds")
    back = Dataset.load(tmp_path / "d.clmds")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.classes == 4


def test_corrupt_files():
    raw = gen_synthetic(2, 2, 8, 8, 1, seed=0).to_bytes()
    with pytest.raises(DatasetError, match="magic"):
        Dataset.from_bytes(b"X" + raw[1:])
    with pytest.raises(DatasetError, match="length"):
        Dataset.from_bytes(raw[:-1])
    with pytest.raises(DatasetError):
        Dataset(np.zeros((1, 2, 2, 1), np.uint8), np.array([5]), 2).to_bytes()


def test_invalid_extents():
    with pytest.raises(DatasetError):
        gen_synthetic(2, 2, 30, 32, 3, seed=0, patch=8)


def test_pixel_nn_has_headroom():
    train = gen_synthetic(10, 10, 32, 32, 3, seed=1)
    test = gen_synthetic(10, 20, 32, 32, 3, seed=2)
    acc = pixel_nn_accuracy(train, test)
    assert 10.0 < acc < 100.0
