"""Command-line interface: exit codes, file contracts, determinism."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from epiwarp.cli import main
from epiwarp.imgio import read_image, read_manifest
from epiwarp.metrics import EvalReport


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


DATASET_ARGS = [
    "--set", "n_phantoms=2",
    "--set", "slices_per_phantom=1",
    "--set", "size=48",
    "--set", 'pe_axes=["row"]',
    "--set", "epi.n_pe=48",
    "--set", "dipole_moment_range=[5e4,2e5]",
    "--set", "split_fractions=[0.5,0,0.5]",
]


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    rc = main(["make-dataset", "--out", str(out), "--seed", "3", *DATASET_ARGS])
    assert rc == 0
    return out


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for sub in ("phantom", "simulate", "make-dataset", "correct", "evaluate"):
        assert sub in out


def test_no_args_exits_nonzero():
    assert main([]) == 1


def test_phantom_writes_rasters(tmp_path):
    out = tmp_path / "ph"
    rc = main(["phantom", "--out", str(out), "--seed", "5", "--size", "48",
               "--slices", "2", "--png"])
    assert rc == 0
    for s in (0, 1):
        for stem in ("b50", "adc", "t2w", "mask"):
            assert (out / f"slice_{s:02d}" / f"{stem}.bin").exists()
            assert (out / f"slice_{s:02d}" / f"{stem}.png").exists()
    img = read_image(out / "slice_00" / "b50")
    assert img.pixels.shape == (48, 48)


def test_simulate_produces_pe_grid(tmp_path):
    out = tmp_path / "sim"
    rc = main(["simulate", "--out", str(out), "--seed", "4",
               "--set", "size=48", "--set", "epi.n_pe=48",
               "--set", "dipole_moment_range=[5e4,2e5]"])
    assert rc == 0
    man = read_manifest(out / "manifest.json")
    # one phantom, one slice, both axes and polarities
    assert len(man.samples) == 4
    tags = {s.sample_id.rsplit("_", 1)[-1] for s in man.samples}
    assert tags == {"rowp", "rowm", "colp", "colm"}
    assert all(s.split == "test" for s in man.samples)


def test_make_dataset_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    args = ["--seed", "3", *DATASET_ARGS]
    assert main(["make-dataset", "--out", str(a), *args]) == 0
    assert main(["make-dataset", "--out", str(b), "--jobs", "3", *args]) == 0
    assert _digest(a) == _digest(b)


def test_make_dataset_config_file_plus_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "n_phantoms": 2, "slices_per_phantom": 1, "size": 48,
        "pe_axes": ["row"], "epi": {"n_pe": 48},
        "dipole_moment_range": [5e4, 2e5],
        "split_fractions": [0.5, 0, 0.5],
    }))
    out = tmp_path / "d"
    rc = main(["make-dataset", "--out", str(out), "--config", str(cfg),
               "--set", "n_phantoms=3", "--seed", "9"])
    assert rc == 0
    man = read_manifest(out / "manifest.json")
    assert len({s.phantom_id for s in man.samples}) == 3
    assert man.rng_seed == 9


def test_make_dataset_rejects_unknown_config_key(tmp_path):
    rc = main(["make-dataset", "--out", str(tmp_path / "x"),
               "--set", "n_fantoms=2"])
    assert rc == 1


def test_make_dataset_missing_config_file(tmp_path):
    rc = main(["make-dataset", "--out", str(tmp_path / "x"),
               "--config", str(tmp_path / "nope.json")])
    assert rc == 1


def test_correct_fugue_writes_triplet(cli_dataset, tmp_path):
    man = read_manifest(cli_dataset / "manifest.json")
    sample = next(s for s in man.samples if s.epi_params.s_pe == 1)
    out = tmp_path / "restored"
    rc = main(["correct", "--method", "fugue-ideal",
               "--in", str(cli_dataset / sample.dir), "--out", str(out)])
    assert rc == 0
    for stem in ("b50", "b1400", "adc", "confidence_b50", "confidence_b1400"):
        assert (out / f"{stem}.bin").exists(), stem
    restored = read_image(out / "b50")
    clean = read_image(cli_dataset / sample.files["clean/b50"])
    distorted = read_image(cli_dataset / sample.files["distorted/b50"])
    err_restored = float(((restored.pixels - clean.pixels) ** 2).sum())
    err_distorted = float(((distorted.pixels - clean.pixels) ** 2).sum())
    assert err_restored < err_distorted


def test_correct_topup_default_dual_inputs(cli_dataset, tmp_path):
    man = read_manifest(cli_dataset / "manifest.json")
    plus = next(s for s in man.samples if s.epi_params.s_pe == 1)
    minus = next(
        s for s in man.samples
        if s.phantom_id == plus.phantom_id
        and s.slice_index == plus.slice_index
        and s.epi_params.s_pe == -1
        and s.epi_params.pe_axis == plus.epi_params.pe_axis
    )
    out = tmp_path / "restored"
    rc = main(["correct", "--method", "topup-default",
               "--in", str(cli_dataset / plus.dir),
               "--in-minus", str(cli_dataset / minus.dir),
               "--out", str(out)])
    assert rc == 0
    assert (out / "vdm_est.bin").exists()
    est = read_image(out / "vdm_est")
    truth = read_image(cli_dataset / plus.files["truth/vdm_px"])
    rmse = float(np.sqrt(((est.pixels - truth.pixels) ** 2).mean()))
    assert rmse < 1.0


def test_correct_dual_method_requires_minus(cli_dataset, tmp_path):
    man = read_manifest(cli_dataset / "manifest.json")
    sample = man.samples[0]
    rc = main(["correct", "--method", "topup-ideal",
               "--in", str(cli_dataset / sample.dir),
               "--out", str(tmp_path / "r")])
    assert rc == 1


def test_correct_unknown_method_exits_one(cli_dataset, tmp_path, capsys):
    rc = main(["correct", "--method", "warp9",
               "--in", str(cli_dataset), "--out", str(tmp_path / "r")])
    assert rc == 1


def test_evaluate_writes_reports(cli_dataset, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["evaluate", "--manifest", str(cli_dataset / "manifest.json"),
               "--methods", "baseline,fugue-ideal,topup-ideal",
               "--out", str(out)])
    assert rc == 0
    assert (out / "report.json").exists()
    assert (out / "report.csv").exists()
    report = EvalReport.from_json(out / "report.json")
    assert report.methods() == ["baseline", "fugue-ideal", "topup-ideal"]
    agg = report.aggregate("nmse")
    assert agg[("baseline", "b50")][0] > agg[("topup-ideal", "b50")][0]
    stdout = capsys.readouterr().out
    assert "baseline" in stdout and "nmse" in stdout


def test_evaluate_restricts_outputs_to_out_dir(cli_dataset, tmp_path):
    before = _digest(cli_dataset)
    out = tmp_path / "eval2"
    rc = main(["evaluate", "--manifest", str(cli_dataset / "manifest.json"),
               "--methods", "fugue-ideal", "--out", str(out)])
    assert rc == 0
    # the input dataset is read-only for evaluation
    assert _digest(cli_dataset) == before
    assert any(out.rglob("*.bin"))


def test_evaluate_unknown_method_lists_valid(cli_dataset, tmp_path, capsys):
    rc = main(["evaluate", "--manifest", str(cli_dataset / "manifest.json"),
               "--methods", "warp9", "--out", str(tmp_path / "e")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "warp9" in err and "topup-ideal" in err


def test_evaluate_neural_without_dir_exits_one(cli_dataset, tmp_path):
    rc = main(["evaluate", "--manifest", str(cli_dataset / "manifest.json"),
               "--methods", "neural", "--out", str(tmp_path / "e")])
    assert rc == 1


def test_evaluate_missing_manifest_exits_one(tmp_path):
    rc = main(["evaluate", "--manifest", str(tmp_path / "nope.json"),
               "--methods", "baseline", "--out", str(tmp_path / "e")])
    assert rc == 1


def test_export_png(cli_dataset, tmp_path):
    man = read_manifest(cli_dataset / "manifest.json")
    stem = cli_dataset / man.samples[0].files["clean/b50"]
    rc = main(["export-png", "--in", str(stem), "--out", str(tmp_path / "x.png")])
    assert rc == 0
    assert (tmp_path / "x.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_runtime_failure_exits_two(tmp_path, capsys):
    # parent of --out is a file: pipeline cannot create the directory
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    rc = main(["phantom", "--out", str(blocker / "sub"), "--size", "48"])
    assert rc == 2
    assert "failure" in capsys.readouterr().err
