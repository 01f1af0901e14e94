"""Restoration quality metrics and the benchmark report container.

NMSE and PSNR are computed over an optional mask; PSNR uses the masked
reference maximum as its peak by default (an explicit peak can be passed
for cross-study comparability) and returns +inf when the MSE is zero.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .imgio import Image2D, require_same_geometry

__all__ = [
    "nmse",
    "psnr",
    "field_rmse",
    "EvalEntry",
    "EvalReport",
]


def _masked(ref: Image2D, test: Image2D,
            mask: Image2D | None) -> tuple[np.ndarray, np.ndarray]:
    require_same_geometry(ref, test)
    r = ref.pixels.astype(np.float64)
    t = test.pixels.astype(np.float64)
    if mask is None:
        return r.ravel(), t.ravel()
    require_same_geometry(ref, mask)
    keep = mask.pixels > 0.5
    if not keep.any():
        raise ValueError("mask selects no pixels")
    return r[keep], t[keep]


def nmse(ref: Image2D, test: Image2D, mask: Image2D | None = None) -> float:
    """Sum of squared error over masked pixels, normalized by ||ref||^2."""
    r, t = _masked(ref, test, mask)
    denom = float(np.sum(r * r))
    if denom == 0.0:
        raise ValueError("reference has zero energy in mask")
    return float(np.sum((r - t) ** 2)) / denom


def psnr(ref: Image2D, test: Image2D, mask: Image2D | None = None,
         peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE) in dB; +inf when test matches ref exactly."""
    r, t = _masked(ref, test, mask)
    mse = float(np.mean((r - t) ** 2))
    if peak is None:
        peak = float(np.max(r))
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def field_rmse(truth: Image2D, est: Image2D,
               mask: Image2D | None = None) -> float:
    """Root-mean-square displacement error in pixels."""
    r, t = _masked(truth, est, mask)
    return float(np.sqrt(np.mean((r - t) ** 2)))


@dataclass(frozen=True)
class EvalEntry:
    """Metrics for one (sample, contrast, method) triple.

    ``restored_dir`` points at the directory holding the scored raster
    (relative to wherever the report lives), so every number in a report
    can be traced back to an image on disk.
    """

    sample_id: str
    phantom_id: str
    contrast: str            # b50 | b1400 | adc
    method: str
    nmse: float
    psnr_db: float
    field_rmse_px: float | None = None
    restored_dir: str | None = None

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "phantom_id": self.phantom_id,
            "contrast": self.contrast,
            "method": self.method,
            "nmse": self.nmse,
            "psnr_db": self.psnr_db,
            "field_rmse_px": self.field_rmse_px,
            "restored_dir": self.restored_dir,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "EvalEntry":
        fr = rec.get("field_rmse_px")
        rd = rec.get("restored_dir")
        return cls(
            sample_id=str(rec["sample_id"]),
            phantom_id=str(rec["phantom_id"]),
            contrast=str(rec["contrast"]),
            method=str(rec["method"]),
            nmse=float(rec["nmse"]),
            psnr_db=float(rec["psnr_db"]),
            field_rmse_px=None if fr is None else float(fr),
            restored_dir=None if rd is None else str(rd),
        )


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, sd


@dataclass
class EvalReport:
    """Per-entry metrics plus recomputable aggregates.

    Aggregates come in two granularities: per-slice treats every entry
    as one observation; per-subject first averages entries within a
    phantom, then takes mean/SD across phantoms.
    """

    entries: list[EvalEntry] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def methods(self) -> list[str]:
        return sorted({e.method for e in self.entries})

    def contrasts(self) -> list[str]:
        return sorted({e.contrast for e in self.entries})

    def select(self, method: str | None = None,
               contrast: str | None = None) -> list[EvalEntry]:
        return [
            e for e in self.entries
            if (method is None or e.method == method)
            and (contrast is None or e.contrast == contrast)
        ]

    def aggregate(self, metric: str = "nmse",
                  granularity: str = "slice") -> dict[tuple[str, str], tuple[float, float]]:
        """(method, contrast) -> (mean, sd) of a metric."""
        if granularity not in ("slice", "subject"):
            raise ValueError(f"granularity must be slice|subject, got {granularity!r}")
        if metric not in ("nmse", "psnr_db", "field_rmse_px"):
            raise ValueError(f"unknown metric {metric!r}")
        out: dict[tuple[str, str], tuple[float, float]] = {}
        for method in self.methods():
            for contrast in self.contrasts():
                sel = self.select(method, contrast)
                if not sel:
                    continue
                if granularity == "slice":
                    vals = [getattr(e, metric) for e in sel]
                else:
                    by_subj: dict[str, list[float]] = {}
                    for e in sel:
                        by_subj.setdefault(e.phantom_id, []).append(getattr(e, metric))
                    vals = [float(np.mean(v)) for v in by_subj.values()]
                out[(method, contrast)] = _mean_sd(vals)
        return out

    def to_json(self, path: str | Path) -> None:
        doc = {
            "entries": [e.to_record() for e in self.entries],
            "failures": list(self.failures),
            "aggregates": {
                gran: {
                    metric: {
                        f"{m}/{c}": {"mean": mean, "sd": sd}
                        for (m, c), (mean, sd) in self.aggregate(metric, gran).items()
                    }
                    for metric in ("nmse", "psnr_db")
                }
                for gran in ("slice", "subject")
            },
        }
        Path(path).write_text(
            json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        return cls(
            entries=[EvalEntry.from_record(r) for r in doc["entries"]],
            failures=list(doc.get("failures", [])),
        )

    def to_csv(self, path: str | Path) -> None:
        """Flat table, one row per (sample, contrast, method)."""
        cols = ["sample_id", "phantom_id", "contrast", "method",
                "nmse", "psnr_db", "field_rmse_px", "restored_dir"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for e in self.entries:
                writer.writerow(e.to_record())

    def summary_lines(self, metric: str = "nmse") -> list[str]:
        lines = []
        agg = self.aggregate(metric, "slice")
        for (method, contrast), (mean, sd) in sorted(agg.items()):
            lines.append(f"{method:14s} {contrast:6s} {metric} "
                         f"{mean:10.4g} +/- {sd:.4g}")
        return lines
