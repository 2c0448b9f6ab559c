import json
import time

import numpy as np
import pytest

from flatrecon.autodiff import ConfigError
from flatrecon.datagen import (
    MaskConfig,
    check_dataset,
    load_dataset,
    make_dataset,
    make_phantom,
    make_sample,
    sample_seed,
)
from flatrecon.physics import NoiseSpec, apply_forward, ifft2_centered

SMALL = {"train": 6, "val": 3, "test": 3}


def test_phantom_is_deterministic():
    a, b = make_phantom(11), make_phantom(11)
    assert np.array_equal(a.image, b.image) and a.ellipses == b.ellipses
    assert not np.array_equal(a.image, make_phantom(12).image)


def test_empty_phantom():
    assert not make_phantom(3, 32, (0, 0)).image.any()


def test_phantom_range():
    for s in range(100):
        img = make_phantom(s, 32).image
        assert img.min() >= 0.0 and img.max() <= 1.0 and img.max() > 0.0
    assert make_phantom(0, 64).image.shape == (64, 64)


def test_bad_ellipse_range():
    with pytest.raises(ConfigError):
        make_phantom(0, 32, (5, 2))


def test_fully_sampled_sample():
    s = make_sample(make_phantom(1), MaskConfig(1, 0.08))
    assert np.array_equal(s.x0, s.x1)
    np.testing.assert_allclose(s.target, make_phantom(1).image, atol=1e-12)


def test_undersampling_aliases():
    ph = make_phantom(2)
    s = make_sample(ph, MaskConfig(8, 0.08))
    zf = np.abs(ifft2_centered(s.x0))
    outside = ph.image == 0
    assert np.sum(zf[outside] ** 2) > 1e-3
    assert np.array_equal(apply_forward(s.x1, s.mask), s.y)
    s.check()


def test_noisy_sample_checks():
    s = make_sample(make_phantom(3), MaskConfig(), NoiseSpec(0.05, 4))
    s.check()
    s.y[0, 0] += 1.0
    with pytest.raises(ValueError):
        s.check()


def test_seed_layout_is_disjoint():
    seen = {sample_seed(r, sp, i) for r in range(3) for sp in ("train", "val", "test") for i in range(50)}
    assert len(seen) == 3 * 3 * 50
    with pytest.raises(ConfigError):
        sample_seed(0, "train", 1 << 18)


def test_dataset_roundtrip(tmp_path):
    root = make_dataset(tmp_path / "ds", seed=5, counts=SMALL, noise=NoiseSpec(0.01, 2))
    files = list((root / "train").iterdir())
    assert len(files) == 3 * SMALL["train"]
    ds = load_dataset(root)
    assert ds.size == 32 and json.loads((root / "mask.json").read_text())["acceleration"] == 8
    for split, n in SMALL.items():
        assert len(ds.splits[split]) == n
        for i, smp in enumerate(ds.splits[split]):
            seed = sample_seed(5, split, i)
            ref = make_sample(make_phantom(seed), ds.mask, smp.noise)
            assert np.array_equal(ref.x1, smp.x1) and np.array_equal(ref.y, smp.y)
            assert np.array_equal(ref.x0, smp.x0)
    assert check_dataset(root) == sum(SMALL.values())


def test_splits_share_no_phantom(tmp_path):
    ds = load_dataset(make_dataset(tmp_path, counts=SMALL))
    digests = [s.x1.tobytes() for sp in ds.splits.values() for s in sp]
    assert len(set(digests)) == len(digests)


def test_refuses_to_overwrite(tmp_path):
    make_dataset(tmp_path, counts=SMALL)
    before = (tmp_path / "manifest.json").read_bytes()
    with pytest.raises(FileExistsError):
        make_dataset(tmp_path, seed=9, counts=SMALL)
    assert (tmp_path / "manifest.json").read_bytes() == before
    make_dataset(tmp_path, seed=9, counts=SMALL, force=True)
    assert (tmp_path / "manifest.json").read_bytes() != before


def test_bad_counts_and_size(tmp_path):
    with pytest.raises(ConfigError):
        make_dataset(tmp_path / "a", counts={"train": 0, "val": 1, "test": 1})
    with pytest.raises(ConfigError):
        make_dataset(tmp_path / "b", counts=SMALL, size=48)


def test_default_dataset_is_fast(tmp_path):
    t = time.perf_counter()
    make_dataset(tmp_path)
    assert time.perf_counter() - t < 10.0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["counts"] == {"train": 200, "val": 40, "test": 40}
