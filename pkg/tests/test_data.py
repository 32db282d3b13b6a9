import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from transferattack import datasets, images
from transferattack.datasets import LabeledDataset


def test_quantize_half_away_from_zero():
    assert images.quantize(np.array([0.5, 1.5, 2.5, 254.5, -0.4, 300])).tolist() == [1, 2, 3, 255, 0, 255]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_png_round_trip(seed):
    x = np.random.default_rng(seed).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    assert np.array_equal(images.decode_png(images.encode_png(x)), x)


def test_as_uint8_rejects_fractions_and_range():
    with pytest.raises(ValueError):
        images.as_uint8(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        images.as_uint8(np.full((2, 2, 3), 256.0))
    assert images.as_uint8(np.full((2, 2, 3), 7.0)).dtype == np.uint8


def test_decode_rejects_non_png():
    with pytest.raises(ValueError):
        images.decode_png(b"definitely not an image")


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4, 3), np.uint8), np.array([0, 5]), ["a", "b"])
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4, 3), np.uint8), np.array([0]), ["a"])


def test_synthetic_generation_is_seeded():
    a = datasets.generate_synthetic_dataset(3, 4, size=16, seed=2)
    b = datasets.generate_synthetic_dataset(3, 4, size=16, seed=2)
    c = datasets.generate_synthetic_dataset(3, 4, size=16, seed=3)
    assert np.array_equal(a.images, b.images) and not np.array_equal(a.images, c.images)
    assert a.images.dtype == np.uint8 and a.images.shape == (12, 16, 16, 3)
    assert np.bincount(a.labels).tolist() == [4, 4, 4]
    assert a.class_names == datasets.FAMILY_NAMES[:3]


def test_family_selection():
    ds = datasets.generate_synthetic_dataset(2, 1, size=16, families=["star", "grid"])
    assert ds.class_names == ["star", "grid"]
    with pytest.raises(ValueError):
        datasets.generate_synthetic_dataset(2, 1, families=["star", "blob"])


def test_every_family_renders_with_contrast():
    rng = np.random.default_rng(0)
    for fam in datasets.FAMILY_NAMES:
        img = datasets.render_shape(fam, 32, rng)
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8
        assert np.ptp(img.astype(float)) >= datasets.MIN_CONTRAST / 2, fam


def test_export_and_ingest_round_trip(tmp_path):
    ds = datasets.generate_synthetic_dataset(3, 2, size=16, seed=1)
    datasets.export_dataset(ds, tmp_path)
    back = datasets.ingest_image_directory(tmp_path, size=(16, 16))
    assert np.array_equal(back.images, ds.images)
    assert back.label_names == ds.label_names
    assert back.provenance["resized"] == []


def test_ingest_resizes_and_records(tmp_path):
    Image.fromarray(np.full((40, 20, 3), 9, np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.full((16, 16, 3), 200, np.uint8)).save(tmp_path / "b.png")
    manifest = {"items": [{"file": "a.png", "label": "x"}, {"file": "b.png", "label": "y"}]}
    ds = datasets.ingest_image_directory(tmp_path, manifest, size=(16, 16))
    assert ds.images.shape == (2, 16, 16, 3)
    assert np.all(ds.images[0] == 9)
    assert [r["file"] for r in ds.provenance["resized"]] == ["a.png"]
    assert ds.provenance["resized"][0]["from"] == [40, 20]


def test_ingest_errors(tmp_path):
    with pytest.raises(ValueError):
        datasets.ingest_image_directory(tmp_path, {"items": []})
    (tmp_path / "bad.png").write_bytes(b"junk")
    with pytest.raises(ValueError):
        datasets.ingest_image_directory(tmp_path, {"items": [{"file": "bad.png", "label": "x"}]})
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "ok.png")
    with pytest.raises(ValueError):
        datasets.ingest_image_directory(tmp_path, {"items": [{"file": "ok.png"}]})
    (tmp_path / "m.json").write_text(json.dumps({"items": [{"file": "ok.png", "label": "z"}]}))
    assert len(datasets.ingest_image_directory(tmp_path, tmp_path / "m.json", size=(4, 4))) == 1
