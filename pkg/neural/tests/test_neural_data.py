"""Manifest-backed data loading into network-space arrays."""

import numpy as np
import pytest
from epiwarp.imgio import read_image, read_manifest
from epiwarp_neural import ADC_SCALE, load_inference_inputs, load_training_split


def test_training_split_shapes_and_dtypes(tiny_manifest):
    samples = load_training_split(tiny_manifest, "train")
    assert len(samples) == 4
    for s in samples:
        assert s.x.shape == (3, 48, 48) and s.x.dtype == np.float32
        assert s.y.shape == (2, 48, 48) and s.y.dtype == np.float32
        assert s.mask.shape == (1, 48, 48)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_channels_match_rasters(tiny_manifest):
    manifest = read_manifest(tiny_manifest)
    mdir = tiny_manifest.parent
    sample = load_training_split(tiny_manifest, "train")[0]
    rec = next(s for s in manifest.samples if s.sample_id == sample.sample_id)

    dist_b50 = read_image(mdir / rec.files["distorted/b50"]).pixels
    dist_adc = read_image(mdir / rec.files["distorted/adc"]).pixels
    t2w = read_image(mdir / rec.files["clean/t2w"]).pixels
    clean_b50 = read_image(mdir / rec.files["clean/b50"]).pixels
    clean_adc = read_image(mdir / rec.files["clean/adc"]).pixels

    assert np.array_equal(sample.x[0], dist_b50)
    assert np.array_equal(sample.x[1], dist_adc * np.float32(ADC_SCALE))
    assert np.array_equal(sample.x[2], t2w)
    assert np.array_equal(sample.y[0], clean_b50)
    assert np.array_equal(sample.y[1], clean_adc * np.float32(ADC_SCALE))


def test_order_follows_manifest(tiny_manifest):
    manifest = read_manifest(tiny_manifest)
    want = [s.sample_id for s in manifest.samples if s.split == "train"]
    got = [s.sample_id for s in load_training_split(tiny_manifest, "train")]
    assert got == want


def test_empty_split_rejected(tiny_manifest):
    with pytest.raises(ValueError, match="no samples in split"):
        load_training_split(tiny_manifest, "val")


def test_inference_inputs_have_no_targets(tiny_manifest):
    samples = load_inference_inputs(tiny_manifest, "test")
    assert len(samples) == 4
    for s in samples:
        assert s.x.shape == (3, 48, 48)
        assert s.y is None and s.mask is None


def test_inference_id_filter(tiny_manifest):
    all_ids = [s.sample_id for s in load_inference_inputs(tiny_manifest, "test")]
    picked = load_inference_inputs(tiny_manifest, "test", sample_ids=all_ids[:2])
    assert [s.sample_id for s in picked] == all_ids[:2]
    with pytest.raises(ValueError, match="not in split"):
        load_inference_inputs(tiny_manifest, "test", sample_ids=["nope"])
