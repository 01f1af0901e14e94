"""Raster and manifest I/O: bit-exact round trips and format validation."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiwarp.forward import EpiParams
from epiwarp.imgio import (
    FOV_MM,
    PAIR_ROLES,
    DatasetManifest,
    FormatError,
    Image2D,
    ImageInvariantError,
    ImageKind,
    ManifestError,
    PairedSample,
    export_png,
    load_pair,
    read_image,
    read_manifest,
    save_pair,
    write_image,
    write_manifest,
)

from support import make_image


def test_round_trip_bit_exact(tmp_path, rng):
    pix = rng.normal(size=(37, 23)).astype(np.float32)
    img = make_image(pix, kind="field_hz", spacing=1.12)
    write_image(img, tmp_path / "f")
    back = read_image(tmp_path / "f")
    assert back.pixels.tobytes() == pix.tobytes()
    assert back.pixels.dtype == np.float32
    assert back.kind is ImageKind.FIELD_HZ
    assert back.spacing_mm == (1.12, 1.12)
    assert back.pe_axis is None


def test_round_trip_preserves_pe_axis(tmp_path):
    img = make_image(np.zeros((4, 4)), kind="vdm_px", pe_axis="col")
    write_image(img, tmp_path / "v")
    assert read_image(tmp_path / "v").pe_axis.value == "col"


def test_payload_is_256kib_for_128_squared(tmp_path):
    img = make_image(np.zeros((128, 128)))
    write_image(img, tmp_path / "z")
    # 128 * 128 * 4 bytes, float32 little-endian, no framing
    assert (tmp_path / "z.bin").stat().st_size == 65536
    img = make_image(np.zeros((256, 256)))
    write_image(img, tmp_path / "big")
    assert (tmp_path / "big.bin").stat().st_size == 262144


def test_payload_is_little_endian_row_major(tmp_path):
    pix = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_image(make_image(pix), tmp_path / "o")
    raw = (tmp_path / "o.bin").read_bytes()
    assert raw == np.array([1, 2, 3, 4], dtype="<f4").tobytes()


def test_write_rejects_nan_and_writes_nothing(tmp_path):
    pix = np.zeros((5, 5), dtype=np.float32)
    pix[2, 2] = np.nan
    with pytest.raises(ImageInvariantError):
        write_image(make_image(pix), tmp_path / "bad")
    assert not (tmp_path / "bad.json").exists()
    assert not (tmp_path / "bad.bin").exists()


def test_write_rejects_inf(tmp_path):
    pix = np.full((3, 3), np.inf, dtype=np.float32)
    with pytest.raises(ImageInvariantError):
        write_image(make_image(pix), tmp_path / "bad")


def test_read_rejects_truncated_payload(tmp_path):
    write_image(make_image(np.zeros((8, 8))), tmp_path / "t")
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="bytes"):
        read_image(tmp_path / "t")


def test_read_rejects_oversized_payload(tmp_path):
    write_image(make_image(np.zeros((8, 8))), tmp_path / "t")
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        read_image(tmp_path / "t")


def test_read_rejects_unknown_kind(tmp_path):
    write_image(make_image(np.zeros((4, 4))), tmp_path / "k")
    header = json.loads((tmp_path / "k.json").read_text())
    header["kind"] = "banana"
    (tmp_path / "k.json").write_text(json.dumps(header))
    with pytest.raises(FormatError, match="banana"):
        read_image(tmp_path / "k")


def test_read_rejects_missing_files(tmp_path):
    with pytest.raises(FormatError):
        read_image(tmp_path / "absent")
    write_image(make_image(np.zeros((4, 4))), tmp_path / "m")
    (tmp_path / "m.bin").unlink()
    with pytest.raises(FormatError):
        read_image(tmp_path / "m")


def test_read_rejects_nonfinite_payload(tmp_path):
    write_image(make_image(np.zeros((4, 4))), tmp_path / "n")
    bad = np.full(16, np.nan, dtype="<f4")
    (tmp_path / "n.bin").write_bytes(bad.tobytes())
    with pytest.raises(FormatError, match="non-finite"):
        read_image(tmp_path / "n")


def test_mask_must_be_binary():
    with pytest.raises(ImageInvariantError, match="mask"):
        make_image(np.full((3, 3), 0.5), kind="mask").validate()
    make_image(np.eye(3), kind="mask").validate()


def test_adc_must_be_nonnegative():
    with pytest.raises(ImageInvariantError):
        make_image(np.full((3, 3), -1e-3), kind="adc").validate()


def test_vdm_requires_pe_axis():
    with pytest.raises(ImageInvariantError, match="pe_axis"):
        make_image(np.zeros((3, 3)), kind="vdm_px").validate()


def test_degenerate_shapes_rejected():
    with pytest.raises(ImageInvariantError):
        make_image(np.zeros((0, 4))).validate()
    with pytest.raises(ImageInvariantError):
        make_image(np.zeros(7)).validate()


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=9),
    w=st.integers(min_value=1, max_value=9),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(tmp_path_factory, h, w, seed):
    d = tmp_path_factory.mktemp("rt")
    pix = np.random.default_rng(seed).normal(size=(h, w)).astype(np.float32)
    write_image(make_image(pix, kind="t2w"), d / "p")
    assert read_image(d / "p").pixels.tobytes() == pix.tobytes()


def test_export_png_writes_file(tmp_path, rng):
    img = make_image(rng.uniform(size=(16, 16)))
    export_png(img, tmp_path / "img.png")
    data = (tmp_path / "img.png").read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"


def test_fov_constant_matches_default_grid():
    # 128 px at 1.12 mm spacing
    assert FOV_MM == pytest.approx(143.36)
    assert FOV_MM / 128 == pytest.approx(1.12)


# ---------------------------------------------------------------------------
# paired samples and manifests
# ---------------------------------------------------------------------------

def _sample(tmp_path, sid="p0000_s00_rowp", write_files=True):
    files = {}
    if write_files:
        sdir = tmp_path / sid
        imgs = {
            "clean/b50": make_image(np.ones((8, 8))),
            "distorted/b50": make_image(np.ones((8, 8)), pe_axis="row"),
            "truth/vdm_px": make_image(np.zeros((8, 8)), kind="vdm_px", pe_axis="row"),
        }
        rel = save_pair(sdir, imgs, {"note": "test"})
        files = {role: f"{sid}/{p}" for role, p in rel.items()}
    return PairedSample(
        sample_id=sid,
        dir=sid,
        phantom_id="p0000",
        slice_index=0,
        split="train",
        seed=42,
        epi_params=EpiParams(s_pe=1, n_pe=128, pf=0.75, r_accel=2.0, esp_s=5e-4),
        dropped_fraction=0.0,
        files=files,
    )


def test_manifest_round_trip(tmp_path):
    s = _sample(tmp_path)
    man = DatasetManifest(
        samples=[s],
        rng_seed=7,
        epi_params_used=[s.epi_params],
        created_by="tests",
    )
    write_manifest(man, tmp_path / "manifest.json")
    back = read_manifest(tmp_path / "manifest.json")
    assert len(back.samples) == 1
    b = back.samples[0]
    assert b.sample_id == s.sample_id
    assert b.epi_params == s.epi_params
    assert b.files == s.files
    assert back.rng_seed == 7


def test_manifest_rejects_duplicate_ids(tmp_path):
    s = _sample(tmp_path)
    man = DatasetManifest(samples=[s, s], rng_seed=0, epi_params_used=[s.epi_params])
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest(man, tmp_path / "manifest.json")


def test_manifest_rejects_dangling_paths(tmp_path):
    s = _sample(tmp_path)
    man = DatasetManifest(samples=[s], rng_seed=0, epi_params_used=[s.epi_params])
    write_manifest(man, tmp_path / "manifest.json")
    stem = tmp_path / s.files["clean/b50"]
    stem.with_suffix(".bin").unlink()
    with pytest.raises(ManifestError, match="dangling"):
        read_manifest(tmp_path / "manifest.json")
    # opt-out skips the existence check
    read_manifest(tmp_path / "manifest.json", check_files=False)


def test_manifest_rejects_bad_version(tmp_path):
    s = _sample(tmp_path)
    man = DatasetManifest(samples=[s], rng_seed=0, epi_params_used=[s.epi_params])
    write_manifest(man, tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["version"] = "999"
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="version"):
        read_manifest(tmp_path / "manifest.json")


def test_manifest_rejects_unknown_split(tmp_path):
    s = _sample(tmp_path)
    s.split = "holdout"
    man = DatasetManifest(samples=[s], rng_seed=0, epi_params_used=[s.epi_params])
    with pytest.raises(ManifestError, match="split"):
        write_manifest(man, tmp_path / "manifest.json")


def test_save_load_pair_round_trip(tmp_path, rng):
    imgs = {
        "clean/b50": make_image(rng.uniform(size=(8, 8)).astype(np.float32)),
        "clean/adc": make_image(
            rng.uniform(1e-4, 3e-3, size=(8, 8)).astype(np.float32), kind="adc"
        ),
        "truth/field_hz": make_image(rng.normal(size=(8, 8)), kind="field_hz"),
    }
    save_pair(tmp_path / "s0", imgs, {"seed": 1})
    back = load_pair(tmp_path / "s0")
    assert set(back) == set(imgs)
    for role in imgs:
        assert back[role].pixels.tobytes() == imgs[role].pixels.tobytes()
    only = load_pair(tmp_path / "s0", roles=["clean/b50"])
    assert set(only) == {"clean/b50"}


def test_pair_roles_cover_contract():
    for role in (
        "clean/b50", "clean/b1400", "clean/adc", "clean/t2w",
        "distorted/b50", "distorted/b1400", "distorted/adc",
        "truth/field_hz", "truth/vdm_px",
    ):
        assert role in PAIR_ROLES
