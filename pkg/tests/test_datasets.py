import numpy as np
import pytest

from hybridsr.datasets import (degrade, load_dataset, mod_crop, synthetic_image,
                               synthetic_samples, write_dataset)
from hybridsr.errors import DatasetError
from hybridsr.metrics import ImageBuf, save_image


def test_mod_crop():
    img = ImageBuf(np.zeros((11, 9, 1), dtype=np.uint8))
    assert mod_crop(img, 4).pixels.shape == (8, 8, 1)


def test_degrade_shape():
    hr = synthetic_image(30, 22, channels=3, seed=1)
    lr = degrade(hr, 4)
    assert (lr.height, lr.width, lr.channels) == (7, 5, 3)


def test_synthetic_is_seeded():
    assert synthetic_image(16, 16, seed=3) == synthetic_image(16, 16, seed=3)
    assert synthetic_image(16, 16, seed=3) != synthetic_image(16, 16, seed=4)


def test_value_range():
    px = synthetic_image(20, 20, seed=1, value_range=(0.35, 0.65)).pixels
    assert px.min() == 89 and px.max() == 166


def test_paired_directory(tmp_path):
    samples = synthetic_samples(3, 16, 2, seed=2)
    write_dataset(tmp_path, samples, with_lr=True)
    back = load_dataset(tmp_path, 2)
    assert [s.name for s in back] == [s.name for s in samples]
    assert all(a.lr == b.lr and a.hr == b.hr for a, b in zip(back, samples))


def test_hr_only_directory(tmp_path):
    samples = synthetic_samples(2, 18, 3, seed=2)
    write_dataset(tmp_path, samples, suffix=".pgm")
    back = load_dataset(tmp_path, 3)
    assert all(a.lr == b.lr for a, b in zip(back, samples))


def test_missing_pair_names_file(tmp_path):
    samples = synthetic_samples(2, 16, 2, seed=2)
    write_dataset(tmp_path, samples, with_lr=True)
    (tmp_path / "LR" / "img001.png").unlink()
    with pytest.raises(DatasetError, match="img001"):
        load_dataset(tmp_path, 2)


def test_size_mismatch(tmp_path):
    samples = synthetic_samples(1, 16, 2, seed=2)
    write_dataset(tmp_path, samples, with_lr=True)
    save_image(ImageBuf(np.zeros((5, 5, 1), dtype=np.uint8)), tmp_path / "LR" / "img000.png")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, 2)


def test_missing_hr_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, 2)
