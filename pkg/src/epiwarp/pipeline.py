"""Dataset synthesis and benchmark orchestration.

One configuration object drives the whole protocol: phantoms are
generated per subject, each slice gets its own dipole-derived field, and
every slice is distorted once per entry of the acquisition grid (both
polarities of both PE axes by default).  Subjects are split into
train/val/test before any sample is produced, so no subject leaks
across splits.  Everything is keyed off per-sample seeds derived from
the global one, which makes the output byte-identical across runs and
independent of worker scheduling.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import metadata as _im
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .correct import (
    RestoreOptions,
    estimate_field_dual_pe,
    restore_dual_pe,
    unwarp_fieldmap,
)
from .dwi import DwiParams, compute_adc, generate_phantom, random_phantom_spec
from .field import (
    FIELD_CAP_HZ,
    DipoleSpec,
    decompose_field,
    dipole_phantom_field,
    synthesize_field,
)
from .forward import DisplacementOverflowError, EpiParams, simulate_pair
from .imgio import (
    DatasetManifest,
    Image2D,
    PairedSample,
    PeAxis,
    load_pair,
    read_image,
    read_manifest,
    save_pair,
    write_image,
    write_manifest,
)
from .metrics import EvalEntry, EvalReport, field_rmse, nmse, psnr

__all__ = [
    "BenchmarkConfig",
    "VALID_METHODS",
    "make_dataset",
    "run_benchmark",
]

log = logging.getLogger(__name__)

VALID_METHODS = ("baseline", "fugue-ideal", "topup-ideal", "topup-default", "neural")


def _tool_version() -> str:
    try:
        return _im.version("epiwarp")
    except _im.PackageNotFoundError:
        return "0.0.0"


def _subseed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    """Everything needed to synthesize one benchmark dataset.

    The acquisition grid is the base ``epi`` parameters expanded over
    ``pe_axes`` x both polarities.  Field strength is controlled by the
    dipole moment range; at the default EPI timing 1 Hz is 0.0235 px, so
    moments around 2e5 Hz px^3 with near-anatomy sources produce shifts
    of several pixels with folded (pile-up) bands.
    """

    n_phantoms: int = 20
    slices_per_phantom: int = 5
    size: int = 128
    phantom_noise_sigma: float = 0.02
    epi: EpiParams = EpiParams(s_pe=1, n_pe=128, pf=0.75, r_accel=2.0,
                               esp_s=5e-4, pe_axis=PeAxis.ROW)
    pe_axes: tuple[str, ...] = ("row", "col")
    dwi: DwiParams = DwiParams()
    # field synthesis
    n_dipoles_range: tuple[int, int] = (1, 2)
    dipole_moment_range: tuple[float, float] = (3.0e5, 1.2e6)
    background_hz_per_px_max: float = 1.0
    fit_order: int = 4
    low_keep_order: int = 2
    hi_scale_range: tuple[float, float] = (0.5, 2.0)
    field_cap_hz: float = FIELD_CAP_HZ
    # protocol
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_phantoms < 1 or self.slices_per_phantom < 1:
            raise ValueError("need at least one phantom and one slice")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split_fractions {fr} must be 3 non-negatives summing to 1")
        for ax in self.pe_axes:
            PeAxis(ax)
        lo, hi = self.n_dipoles_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad n_dipoles_range {self.n_dipoles_range}")

    def epi_grid(self) -> list[EpiParams]:
        grid = []
        for ax in self.pe_axes:
            for sign in (1, -1):
                grid.append(replace(self.epi, s_pe=sign, pe_axis=PeAxis(ax)))
        return grid

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_phantoms": self.n_phantoms,
            "slices_per_phantom": self.slices_per_phantom,
            "size": self.size,
            "phantom_noise_sigma": self.phantom_noise_sigma,
            "epi": self.epi.to_dict(),
            "pe_axes": list(self.pe_axes),
            "dwi": {
                "b_low": self.dwi.b_low,
                "b_high": self.dwi.b_high,
                "adc_floor": self.dwi.adc_floor,
                "signal_floor": self.dwi.signal_floor,
            },
            "n_dipoles_range": list(self.n_dipoles_range),
            "dipole_moment_range": list(self.dipole_moment_range),
            "background_hz_per_px_max": self.background_hz_per_px_max,
            "fit_order": self.fit_order,
            "low_keep_order": self.low_keep_order,
            "hi_scale_range": list(self.hi_scale_range),
            "field_cap_hz": self.field_cap_hz,
            "split_fractions": list(self.split_fractions),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchmarkConfig":
        kwargs: dict[str, Any] = dict(d)
        if "epi" in kwargs:
            kwargs["epi"] = EpiParams.from_dict(kwargs["epi"])
        if "dwi" in kwargs:
            kwargs["dwi"] = DwiParams(**kwargs["dwi"])
        for key in ("pe_axes", "n_dipoles_range", "dipole_moment_range",
                    "hi_scale_range", "split_fractions"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _assign_splits(cfg: BenchmarkConfig) -> dict[str, str]:
    """Subject-level split assignment, deterministic in the global seed."""
    ids = [f"ph{idx:03d}" for idx in range(cfg.n_phantoms)]
    rng = np.random.default_rng(_subseed(cfg.seed, 0))
    order = rng.permutation(cfg.n_phantoms)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_phantoms))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_phantoms))
    n_train = min(n_train, cfg.n_phantoms)
    n_val = min(n_val, cfg.n_phantoms - n_train)
    splits: dict[str, str] = {}
    for rank, pidx in enumerate(order):
        if rank < n_train:
            splits[ids[pidx]] = "train"
        elif rank < n_train + n_val:
            splits[ids[pidx]] = "val"
        else:
            splits[ids[pidx]] = "test"
    return splits


def _random_field(cfg: BenchmarkConfig, seed: int, shape: tuple[int, int],
                  spacing_mm: tuple[float, float]) -> Image2D:
    """One slice's off-resonance map: dipoles near the rectum/hips,
    band-limited and perturbed."""
    rng = np.random.default_rng(seed)
    h, w = shape
    n_dip = int(rng.integers(cfg.n_dipoles_range[0], cfg.n_dipoles_range[1] + 1))
    centers = []
    moments = []
    orientations = []
    for k in range(n_dip):
        if k == 0:
            # posterior source below the body outline (behind the rectum)
            centers.append((h * rng.uniform(1.02, 1.15), w * rng.uniform(0.35, 0.65)))
        else:
            # lateral source outside the body (hip hardware)
            offset = rng.uniform(0.06, 0.18)
            col = -offset if rng.random() < 0.5 else 1.0 + offset
            centers.append((h * rng.uniform(0.45, 0.75), w * float(col)))
        moments.append(float(rng.uniform(*cfg.dipole_moment_range))
                       * float(rng.choice((-1.0, 1.0))))
        ang = rng.uniform(0, 2 * np.pi)
        orientations.append((float(np.cos(ang)), float(np.sin(ang))))
    g = cfg.background_hz_per_px_max
    spec = DipoleSpec(
        centers=tuple(centers),
        moments=tuple(moments),
        orientations=tuple(orientations),
        background_hz_per_px=(float(rng.uniform(-g, g)), float(rng.uniform(-g, g))),
    )
    raw = dipole_phantom_field(spec, shape, spacing_mm)
    coeffs, residual = decompose_field(raw, cfg.fit_order)
    return synthesize_field(
        coeffs, residual,
        low_keep_order=cfg.low_keep_order,
        hi_scale_range=cfg.hi_scale_range,
        seed=int(rng.integers(0, 2**63)),
        cap_hz=cfg.field_cap_hz,
    )


def _pe_tag(p: EpiParams) -> str:
    return f"{p.pe_axis.value}{'p' if p.s_pe > 0 else 'm'}"


def _make_slice_samples(cfg: BenchmarkConfig, out: Path, pidx: int, sidx: int,
                        split: str, grid: Sequence[EpiParams]
                        ) -> list[PairedSample]:
    phantom_id = f"ph{pidx:03d}"
    spec = random_phantom_spec(
        seed=_subseed(cfg.seed, 1, pidx),
        size=cfg.size,
        noise_sigma=cfg.phantom_noise_sigma,
        slice_index=sidx,
    )
    clean = generate_phantom(spec)
    fld = _random_field(cfg, _subseed(cfg.seed, 2, pidx, sidx),
                        clean["b50"].pixels.shape, clean["b50"].spacing_mm)
    samples = []
    for eidx, p in enumerate(grid):
        sample_id = f"{phantom_id}_s{sidx:02d}_{_pe_tag(p)}"
        try:
            pair = simulate_pair(clean, fld, p, cfg.dwi)
        except DisplacementOverflowError as exc:
            log.warning("skipping %s: %s", sample_id, exc)
            continue
        sample_dir = out / "samples" / sample_id
        rel_files = save_pair(
            sample_dir, pair.images,
            {
                "epi_params": p.to_dict(),
                "sample_seed": _subseed(cfg.seed, 3, pidx, sidx, eidx),
                "dropped_fraction": pair.dropped_fraction,
                "split": split,
            },
        )
        samples.append(PairedSample(
            sample_id=sample_id,
            dir=f"samples/{sample_id}",
            phantom_id=phantom_id,
            slice_index=sidx,
            split=split,
            seed=_subseed(cfg.seed, 3, pidx, sidx, eidx),
            epi_params=p,
            dropped_fraction=pair.dropped_fraction,
            files={role: f"samples/{sample_id}/{rel}"
                   for role, rel in rel_files.items()},
        ))
    return samples


def make_dataset(cfg: BenchmarkConfig, out_dir: str | Path,
                 jobs: int = 1) -> DatasetManifest:
    """Synthesize the full paired dataset and write its manifest.

    Deterministic per config (byte-identical across runs); samples whose
    displacement overflows the grid are skipped with a logged warning.
    ``jobs`` parallelizes over slices; per-sample seeds make the output
    independent of scheduling.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = _assign_splits(cfg)
    grid = cfg.epi_grid()

    tasks = [
        (pidx, sidx)
        for pidx in range(cfg.n_phantoms)
        for sidx in range(cfg.slices_per_phantom)
    ]

    def run(task: tuple[int, int]) -> list[PairedSample]:
        pidx, sidx = task
        return _make_slice_samples(cfg, out, pidx, sidx,
                                   splits[f"ph{pidx:03d}"], grid)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_slice = list(pool.map(run, tasks))
    else:
        per_slice = [run(t) for t in tasks]

    samples = [s for chunk in per_slice for s in chunk]
    manifest = DatasetManifest(
        samples=samples,
        rng_seed=cfg.seed,
        epi_params_used=grid,
        created_by=f"epiwarp {_tool_version()}",
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------


def _sibling_index(samples: Iterable[PairedSample]
                   ) -> dict[tuple, dict[int, PairedSample]]:
    idx: dict[tuple, dict[int, PairedSample]] = {}
    for s in samples:
        p = s.epi_params
        key = (s.phantom_id, s.slice_index, p.pe_axis.value,
               p.n_pe, p.pf, p.r_accel, p.esp_s, p.esp_divide)
        idx.setdefault(key, {})[p.s_pe] = s
    return idx


def _load_roles(base: Path, s: PairedSample, roles: Sequence[str]) -> dict[str, Image2D]:
    return {role: read_image(base / s.files[role]) for role in roles if role in s.files}


def _write_restored(out_dir: Path, method: str, sample_id: str,
                    images: Mapping[str, Image2D]) -> str:
    rel = Path("restored") / method / sample_id
    dest = out_dir / rel
    dest.mkdir(parents=True, exist_ok=True)
    for name, img in images.items():
        write_image(img, dest / name)
    return str(rel)


def run_benchmark(manifest_path: str | Path,
                  methods: Sequence[str],
                  out_dir: str | Path,
                  opts: RestoreOptions = RestoreOptions(),
                  dwi_params: DwiParams = DwiParams(),
                  neural_dir: str | Path | None = None,
                  split: str = "test",
                  no_reference: bool = False,
                  jobs: int = 1) -> EvalReport:
    """Score correction methods on one split of a dataset.

    Classical methods restore the two DWIs and recompute the ADC from
    them; every scored raster is written under ``out_dir`` (baseline
    entries reference the dataset's own distorted files).  The ``neural``
    method scores rasters a separately trained model already wrote to
    ``neural_dir/<sample_id>/{b50,adc,b1400}``.  With ``no_reference``
    the restored images and confidence masks are still produced but no
    metrics are computed (entries stay empty): the mode for data without
    clean references.  ``jobs`` caps worker threads; results are merged
    in sample order, so the report is identical for any jobs value.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in VALID_METHODS]
    if unknown:
        raise ValueError(
            f"unknown method(s) {unknown}; valid methods: {list(VALID_METHODS)}"
        )
    if "neural" in methods and neural_dir is None:
        raise ValueError("method 'neural' needs neural_dir (model outputs)")

    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    samples = manifest.split_samples(split)
    if not samples:
        raise ValueError(f"no samples in split {split!r}")
    samples = sorted(samples, key=lambda s: s.sample_id)
    siblings = _sibling_index(manifest.samples)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # opposite-polarity siblings share one dual-PE solve; per-key locks keep
    # that cache race-free without serializing unrelated pairs
    pair_cache: dict[tuple, tuple[str, Any]] = {}
    cache_guard = threading.Lock()
    key_locks: dict[tuple, threading.Lock] = {}

    def _key_lock(key: tuple) -> threading.Lock:
        with cache_guard:
            return key_locks.setdefault(key, threading.Lock())

    def dual_pe_inputs(s: PairedSample):
        p = s.epi_params
        key = (s.phantom_id, s.slice_index, p.pe_axis.value,
               p.n_pe, p.pf, p.r_accel, p.esp_s, p.esp_divide)
        both = siblings.get(key, {})
        if 1 not in both or -1 not in both:
            return None
        return both[1], both[-1]

    def restore_pair(method: str, s: PairedSample,
                     failures: list[dict]) -> dict[str, Image2D] | None:
        """Restored triplet for dual-PE methods, cached per acquisition pair."""
        pair = dual_pe_inputs(s)
        if pair is None:
            failures.append({
                "sample_id": s.sample_id, "method": method,
                "reason": "no opposite-polarity sibling in dataset",
            })
            return None
        plus, minus = pair
        cache_key = (method, plus.sample_id)
        with _key_lock(cache_key):
            if cache_key not in pair_cache:
                pair_cache[cache_key] = _solve_pair(method, plus, minus)
        status, payload = pair_cache[cache_key]
        if status == "failed":
            failures.append({
                "sample_id": s.sample_id, "method": method, "reason": payload,
            })
            return None
        return payload

    def _solve_pair(method: str, plus: PairedSample,
                    minus: PairedSample) -> tuple[str, Any]:
        plus_imgs = _load_roles(base, plus, ["distorted/b50", "distorted/b1400"])
        minus_imgs = _load_roles(base, minus, ["distorted/b50", "distorted/b1400"])
        vdm_true = read_image(base / plus.files["truth/vdm_px"])
        if method == "topup-ideal":
            vdm = vdm_true
            extra: dict[str, Image2D] = {}
        else:
            est = estimate_field_dual_pe(
                plus_imgs["distorted/b50"], minus_imgs["distorted/b50"],
                plus.epi_params, opts,
            )
            vdm = est.vdm
            extra = {"vdm_est": est.vdm}
        try:
            b50 = restore_dual_pe(plus_imgs["distorted/b50"],
                                  minus_imgs["distorted/b50"], vdm, opts)
            b1400 = restore_dual_pe(plus_imgs["distorted/b1400"],
                                    minus_imgs["distorted/b1400"], vdm, opts)
        except ValueError as exc:
            return ("failed", str(exc))
        result = {
            "b50": b50,
            "b1400": b1400,
            "adc": compute_adc(b50, b1400, dwi_params),
            **extra,
        }
        if method == "topup-default":
            result["_vdm_truth"] = vdm_true
        return ("ok", result)

    def score_sample(s: PairedSample) -> tuple[list[EvalEntry], list[dict]]:
        entries: list[EvalEntry] = []
        failures: list[dict] = []
        clean = {} if no_reference else _load_roles(
            base, s, ["clean/b50", "clean/b1400", "clean/adc", "clean/mask"])
        mask = clean.get("clean/mask")
        dist = _load_roles(base, s, ["distorted/b50", "distorted/b1400",
                                     "distorted/adc", "truth/vdm_px"])

        for method in methods:
            restored: dict[str, Image2D] | None
            restored_dir: str | None
            fr_px = None

            if method == "baseline":
                restored = {
                    "b50": dist["distorted/b50"],
                    "b1400": dist["distorted/b1400"],
                    "adc": dist["distorted/adc"],
                }
                restored_dir = s.dir
            elif method == "fugue-ideal":
                vdm = dist["truth/vdm_px"]
                u50 = unwarp_fieldmap(dist["distorted/b50"], vdm, opts)
                u1400 = unwarp_fieldmap(dist["distorted/b1400"], vdm, opts)
                restored = {
                    "b50": u50.restored,
                    "b1400": u1400.restored,
                    "adc": compute_adc(u50.restored, u1400.restored, dwi_params),
                    "confidence_b50": u50.confidence_mask,
                }
                restored_dir = _write_restored(out, method, s.sample_id, restored)
            elif method in ("topup-ideal", "topup-default"):
                restored = restore_pair(method, s, failures)
                if restored is None:
                    continue
                if method == "topup-default":
                    truth = restored["_vdm_truth"]
                    fr_px = field_rmse(truth, restored["vdm_est"], mask)
                to_write = {k: v for k, v in restored.items()
                            if not k.startswith("_")}
                restored_dir = _write_restored(out, method, s.sample_id, to_write)
            else:  # neural
                ndir = Path(neural_dir) / s.sample_id
                try:
                    restored = {c: read_image(ndir / c)
                                for c in ("b50", "b1400", "adc")}
                except (OSError, ValueError) as exc:
                    failures.append({
                        "sample_id": s.sample_id, "method": method,
                        "reason": str(exc),
                    })
                    continue
                restored_dir = str(ndir)

            if no_reference:
                continue
            for contrast in ("b50", "b1400", "adc"):
                ref = clean[f"clean/{contrast}"]
                test = restored[contrast]
                entries.append(EvalEntry(
                    sample_id=s.sample_id,
                    phantom_id=s.phantom_id,
                    contrast=contrast,
                    method=method,
                    nmse=nmse(ref, test, mask),
                    psnr_db=psnr(ref, test, mask),
                    field_rmse_px=fr_px if contrast == "b50" else None,
                    restored_dir=restored_dir,
                ))
        return entries, failures

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score_sample, samples))
    else:
        results = [score_sample(s) for s in samples]

    report = EvalReport()
    for entries, failures in results:
        report.entries.extend(entries)
        report.failures.extend(failures)
    return report
