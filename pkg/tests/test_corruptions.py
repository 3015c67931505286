import json

import numpy as np
import pytest

from mlmp import _accel
from mlmp.corruptions import (
    KINDS,
    SEVERITY_PARAMS,
    CorruptionSpec,
    apply,
    build_corrupted_dataset,
    corrupt,
    pixelate,
)
from mlmp.datasets import make_toy_dataset, toy_samples


@pytest.fixture(scope="module")
def image():
    return toy_samples(1, seed=11, side=48)[0].image


def test_fifteen_kinds_with_five_levels():
    assert len(KINDS) == 15 == len(set(KINDS))
    assert all(len(SEVERITY_PARAMS[k]) == 5 for k in KINDS)


@pytest.mark.parametrize("kind", KINDS)
def test_severity_five_is_bit_reproducible(kind, image):
    spec = CorruptionSpec(kind, 5, seed=7)
    a, b = corrupt(image, spec, "img.png"), corrupt(image, spec, "img.png")
    assert a.dtype == np.uint8 and a.shape == image.shape
    assert np.array_equal(a, b)
    assert not np.array_equal(a, image)


@pytest.mark.parametrize("kind", ["gaussian_noise", "glass_blur", "snow", "fog", "elastic_transform"])
def test_seed_and_key_change_random_kinds(kind, image):
    base = corrupt(image, CorruptionSpec(kind, 5, 0), "a")
    assert not np.array_equal(base, corrupt(image, CorruptionSpec(kind, 5, 1), "a"))
    assert not np.array_equal(base, corrupt(image, CorruptionSpec(kind, 5, 0), "b"))


def test_noise_grows_with_severity(image):
    errs = [np.abs(corrupt(image, CorruptionSpec("gaussian_noise", s)).astype(float) - image).mean()
            for s in range(1, 6)]
    assert all(a < b for a, b in zip(errs, errs[1:]))


def test_zero_brightness_shift_is_identity(image):
    out = apply(image, "brightness", 0.0)
    assert np.abs(out.astype(int) - image).max() <= 1


def test_unit_contrast_is_identity(image):
    assert np.array_equal(apply(image, "contrast", 1.0), image)


def test_pixelate_is_block_mean():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    out = pixelate(img, 0.25)
    blocks = img.reshape(8, 4, 8, 4, 3).astype(float).mean(axis=(1, 3))
    expected = np.repeat(np.repeat(blocks, 4, axis=0), 4, axis=1)
    # PIL's box filter works in fixed point: within one grey level of the exact mean
    assert np.abs(out - expected).max() < 1.0


@pytest.mark.parametrize("bad", [np.zeros((8, 8), np.uint8), np.zeros((8, 8, 3), np.float32),
                                 np.zeros((8, 8, 4), np.uint8)])
def test_non_rgb_input_is_rejected(bad):
    with pytest.raises(ValueError, match="RGB"):
        corrupt(bad, CorruptionSpec("contrast"))


@pytest.mark.parametrize("kwargs", [dict(kind="rain"), dict(kind="fog", severity=0),
                                    dict(kind="fog", severity=6)])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        CorruptionSpec(**kwargs)


def test_materialised_dataset_layout_and_label_bytes(tmp_path):
    src = tmp_path / "src"
    make_toy_dataset(src, 2, seed=0, side=32)
    manifest = build_corrupted_dataset(src, tmp_path / "dst", KINDS, severity=5, seed=0)
    labels = {p.name: p.read_bytes() for p in (src / "labels").iterdir()}
    for kind in KINDS:
        out = tmp_path / "dst" / kind
        assert sorted(p.name for p in (out / "images").iterdir()) == sorted(labels)
        for name, data in labels.items():
            assert (out / "labels" / name).read_bytes() == data
    assert [e["kind"] for e in manifest["kinds"]] == list(KINDS)
    assert all(e["file_count"] == 2 == e["label_count"] for e in manifest["kinds"])
    on_disk = json.loads((tmp_path / "dst" / "manifest.json").read_text())
    assert on_disk["kinds"] == manifest["kinds"] and on_disk["skipped"] == []


def test_rebuild_gives_identical_checksums(tmp_path):
    src = tmp_path / "src"
    make_toy_dataset(src, 2, seed=1, side=32)
    a = build_corrupted_dataset(src, tmp_path / "a", ["shot_noise", "frost"], seed=3)
    b = build_corrupted_dataset(src, tmp_path / "b", ["shot_noise", "frost"], seed=3, workers=2)
    assert [e["checksum"] for e in a["kinds"]] == [e["checksum"] for e in b["kinds"]]


def test_unlabelled_images_are_skipped_and_reported(tmp_path):
    src = tmp_path / "src"
    make_toy_dataset(src, 2, seed=0, side=32)
    (src / "labels" / "toy_0001.png").unlink()
    manifest = build_corrupted_dataset(src, tmp_path / "dst", ["contrast"])
    assert manifest["kinds"][0]["file_count"] == 1
    assert manifest["skipped"] == [{"file": "toy_0001.png", "reason": "missing label"}]


def test_missing_source_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        build_corrupted_dataset(tmp_path / "nope", tmp_path / "dst", ["fog"])


# -- compiled kernels agree with the numpy path ----------------------------------


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba unavailable")
def test_glass_shuffle_backends_agree():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(20, 24, 3), dtype=np.uint8)
    offsets = rng.integers(-2, 2, size=(2, _accel.glass_sites(20, 24, 2), 2))
    assert np.array_equal(_accel.glass_shuffle_numpy(img, offsets, 2),
                          _accel.glass_shuffle_numba(img, offsets, 2))


def test_glass_shuffle_single_swap_oracle():
    img = np.arange(5 * 5 * 3, dtype=np.uint8).reshape(5, 5, 3)
    # a 5x5 image with max_delta 2 has exactly one site, (3, 3)
    sites = _accel.glass_sites(5, 5, 2)
    assert sites == 1
    out = _accel.glass_shuffle(img, np.array([[[-1, 1]]]), 2)
    expected = img.copy()
    expected[3, 3], expected[2, 4] = img[2, 4], img[3, 3]
    assert np.array_equal(out, expected)


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba unavailable")
def test_confusion_backends_agree():
    rng = np.random.default_rng(1)
    label = rng.integers(0, 6, size=(40, 40))
    label[rng.random((40, 40)) < 0.1] = 255
    pred = rng.integers(0, 6, size=(40, 40))
    assert np.array_equal(_accel.confusion_counts_numpy(label, pred, 6),
                          _accel.confusion_counts_numba(label, pred, 6))
