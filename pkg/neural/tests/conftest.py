"""Shared fixtures: small pipeline-built datasets and announcement helper.

Datasets are generated through the public pipeline API and consumed by
the package under test purely via manifest + raster files, the same way
any external caller would.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest
from epiwarp.forward import EpiParams
from epiwarp.imgio import PeAxis, read_manifest, write_manifest
from epiwarp.pipeline import BenchmarkConfig, make_dataset


def _small_cfg(**kw) -> BenchmarkConfig:
    # n_pe matches the grid so even a field at the cap stays in-grid
    # (no skipped samples, any seed).
    base = dict(
        n_phantoms=4, slices_per_phantom=1, size=48,
        phantom_noise_sigma=0.0, pe_axes=("row",),
        epi=EpiParams(s_pe=1, n_pe=48, pf=0.75, r_accel=2.0, esp_s=5e-4,
                      pe_axis=PeAxis.ROW),
        dipole_moment_range=(5e4, 2e5),
        split_fractions=(0.5, 0.0, 0.5), seed=101,
    )
    base.update(kw)
    return BenchmarkConfig(**base)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> Path:
    """8 samples at 48 px: 4 train, 4 test."""
    out = tmp_path_factory.mktemp("tiny_ds")
    make_dataset(_small_cfg(), out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def single_manifest(tiny_manifest) -> Path:
    """A one-sample manifest reusing the tiny dataset's rasters."""
    manifest = read_manifest(tiny_manifest)
    first_train = next(s for s in manifest.samples if s.split == "train")
    solo = replace(manifest, samples=[first_train])
    path = tiny_manifest.parent / "manifest_single.json"
    write_manifest(solo, path)
    return path


@pytest.fixture(scope="session")
def no_train_manifest(tiny_manifest) -> Path:
    """Same rasters, every sample marked test."""
    manifest = read_manifest(tiny_manifest)
    for s in manifest.samples:
        s.split = "test"
    path = tiny_manifest.parent / "manifest_no_train.json"
    write_manifest(manifest, path)
    return path


@pytest.fixture(scope="session")
def ten_manifest(tmp_path_factory) -> Path:
    """10 training samples (5 phantoms x 2 polarities), no test split."""
    out = tmp_path_factory.mktemp("ten_ds")
    make_dataset(_small_cfg(n_phantoms=5, split_fractions=(1.0, 0.0, 0.0),
                            seed=202), out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def zero_distortion_manifest(tmp_path_factory) -> Path:
    """Fields so weak the distorted rasters equal the clean ones."""
    out = tmp_path_factory.mktemp("zero_ds")
    make_dataset(_small_cfg(n_phantoms=2, seed=303,
                            dipole_moment_range=(1e-3, 2e-3),
                            background_hz_per_px_max=0.0), out)
    return out / "manifest.json"


@pytest.fixture
def announce(request, capsys):
    """Print one pass line per criterion even under output capture."""
    def _announce(text: str) -> None:
        with capsys.disabled():
            print(f"\n[PASS] {request.node.name}: {text}")
    return _announce
