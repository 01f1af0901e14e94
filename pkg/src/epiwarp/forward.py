"""Forward ssEPI distortion model.

Off-resonance shifts signal along the phase-encoding axis.  The shift in
pixels at position r is

    vdm(r) = s_pe * field_hz(r) * (n_pe * pf / r_accel - 1) * esp_s

i.e. the off-resonance times the effective phase-encode readout
duration, signed by the PE polarity.  Distortion is applied by a
mass-conserving splat: each source pixel deposits its intensity at the
shifted position, split linearly between the two nearest integer
positions.  Pile-up, stretching, compression, and dropout all emerge
from this single operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .dwi import DwiParams, compute_adc, synth_high_b
from .imgio import (
    GeometryMismatchError,
    Image2D,
    ImageKind,
    PeAxis,
    require_same_geometry,
)

__all__ = [
    "EpiParams",
    "DisplacementOverflowError",
    "compute_vdm",
    "forward_splat",
    "simulate_pair",
    "SimulatedPair",
]


class DisplacementOverflowError(ValueError):
    """A computed displacement meets or exceeds the grid extent."""


@dataclass(frozen=True)
class EpiParams:
    """ssEPI acquisition parameters that set the distortion scale.

    s_pe: phase-encode polarity, +1 or -1.
    n_pe: number of phase-encode lines (> 1).
    pf: partial-Fourier fraction in (0.5, 1].
    r_accel: in-plane acceleration factor (>= 1).
    esp_s: echo spacing in seconds (> 0).
    pe_axis: image axis the shift acts along.
    esp_divide: divide by esp_s instead of multiplying.  Dimensionally
        wrong (off by esp^2) but kept as an opt-in audit knob; see README.
    """

    s_pe: int = 1
    n_pe: int = 128
    pf: float = 1.0
    r_accel: float = 2.0
    esp_s: float = 5e-4
    pe_axis: PeAxis = PeAxis.ROW
    esp_divide: bool = False

    def __post_init__(self) -> None:
        if self.s_pe not in (1, -1):
            raise ValueError(f"s_pe must be +1 or -1, got {self.s_pe}")
        if not (isinstance(self.n_pe, int) and self.n_pe > 1):
            raise ValueError(f"n_pe must be an integer > 1, got {self.n_pe}")
        if not (0.5 < self.pf <= 1.0):
            raise ValueError(f"pf must lie in (0.5, 1], got {self.pf}")
        if self.r_accel < 1:
            raise ValueError(f"r_accel must be >= 1, got {self.r_accel}")
        if self.esp_s <= 0:
            raise ValueError(f"esp_s must be positive, got {self.esp_s}")
        object.__setattr__(self, "pe_axis", PeAxis(self.pe_axis))
        if self.echo_train_lines <= 1:
            raise ValueError(
                f"effective echo train n_pe*pf/r_accel = {self.echo_train_lines} "
                "must exceed 1"
            )

    @property
    def echo_train_lines(self) -> float:
        return self.n_pe * self.pf / self.r_accel

    @property
    def px_per_hz(self) -> float:
        """Signed displacement per Hz of off-resonance."""
        lines = self.echo_train_lines - 1.0
        if self.esp_divide:
            return self.s_pe * lines / self.esp_s
        return self.s_pe * lines * self.esp_s

    def flipped(self) -> "EpiParams":
        """Same acquisition with reversed PE polarity."""
        return EpiParams(
            s_pe=-self.s_pe, n_pe=self.n_pe, pf=self.pf, r_accel=self.r_accel,
            esp_s=self.esp_s, pe_axis=self.pe_axis, esp_divide=self.esp_divide,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "s_pe": self.s_pe,
            "n_pe": self.n_pe,
            "pf": self.pf,
            "r_accel": self.r_accel,
            "esp_s": self.esp_s,
            "pe_axis": self.pe_axis.value,
            "esp_divide": self.esp_divide,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EpiParams":
        return cls(
            s_pe=int(d["s_pe"]),
            n_pe=int(d["n_pe"]),
            pf=float(d["pf"]),
            r_accel=float(d["r_accel"]),
            esp_s=float(d["esp_s"]),
            pe_axis=PeAxis(d.get("pe_axis", "row")),
            esp_divide=bool(d.get("esp_divide", False)),
        )


def compute_vdm(field: Image2D, p: EpiParams) -> Image2D:
    """Displacement map (pixels along p.pe_axis) from an off-resonance map.

    Linear in the field and sign-antisymmetric in s_pe.  Rejects fields
    whose displacement magnitude reaches the grid extent along the PE
    axis, since such shifts cannot be represented on the grid at all.
    """
    field.validate()
    if field.kind is not ImageKind.FIELD_HZ:
        raise ValueError(f"expected a field_hz image, got {field.kind.value}")
    shift = field.pixels.astype(np.float64) * p.px_per_hz
    extent = field.pixels.shape[p.pe_axis.index]
    worst = float(np.max(np.abs(shift)))
    if worst >= extent:
        raise DisplacementOverflowError(
            f"max |shift| {worst:.2f} px >= PE extent {extent} px"
        )
    return Image2D(shift.astype(np.float32), kind=ImageKind.VDM_PX,
                   spacing_mm=field.spacing_mm, pe_axis=p.pe_axis)


def _splat_columns(src: np.ndarray, shift: np.ndarray) -> tuple[np.ndarray, float]:
    """Splat along axis 0. Returns (float64 accumulator, dropped fraction).

    Each source pixel (i, j) deposits src[i, j] at row i + shift[i, j],
    linearly split between floor and ceil; deposits landing outside
    [0, n) are discarded.
    """
    n, m = src.shape
    pos = np.arange(n, dtype=np.float64)[:, None] + shift
    lo = np.floor(pos)
    w_hi = pos - lo
    w_lo = 1.0 - w_hi
    lo = lo.astype(np.int64)
    hi = lo + 1
    cols = np.broadcast_to(np.arange(m, dtype=np.int64), (n, m))

    out = np.zeros((n, m), dtype=np.float64)
    in_lo = (lo >= 0) & (lo < n)
    in_hi = (hi >= 0) & (hi < n)
    np.add.at(out, (lo[in_lo], cols[in_lo]), src[in_lo] * w_lo[in_lo])
    np.add.at(out, (hi[in_hi], cols[in_hi]), src[in_hi] * w_hi[in_hi])

    total = float(np.sum(np.abs(src), dtype=np.float64))
    dropped = float(np.sum(np.abs(src * w_lo), where=~in_lo, dtype=np.float64)
                    + np.sum(np.abs(src * w_hi), where=~in_hi, dtype=np.float64))
    frac = dropped / total if total > 0 else 0.0
    return out, frac


def forward_splat(img: Image2D, vdm: Image2D) -> Image2D:
    """Apply the distortion a displacement map prescribes.

    Accumulates in float64 and casts to float32 on output, so per-line
    intensity totals are conserved to well below 1e-10 relative for
    in-grid displacements.  See :func:`splat_dropped_fraction` for the
    out-of-grid loss.
    """
    out, _ = _splat_with_loss(img, vdm)
    return out


def splat_dropped_fraction(img: Image2D, vdm: Image2D) -> float:
    """Fraction of total |intensity| that the splat deposits off-grid."""
    _, frac = _splat_with_loss(img, vdm)
    return frac


def _splat_with_loss(img: Image2D, vdm: Image2D) -> tuple[Image2D, float]:
    img.validate()
    vdm.validate()
    require_same_geometry(img, vdm)
    if vdm.kind is not ImageKind.VDM_PX:
        raise ValueError(f"expected a vdm_px displacement map, got {vdm.kind.value}")
    axis = vdm.pe_axis.index
    src = img.pixels.astype(np.float64)
    shift = vdm.pixels.astype(np.float64)
    if axis == 1:
        acc, frac = _splat_columns(src.T, shift.T)
        acc = acc.T
    else:
        acc, frac = _splat_columns(src, shift)
    return img.with_pixels(acc.astype(np.float32), pe_axis=vdm.pe_axis), frac


@dataclass
class SimulatedPair:
    """In-memory result of one forward simulation.

    ``images`` is keyed by the on-disk roles (clean/*, distorted/*,
    truth/*); ``dropped_fraction`` is the intensity fraction the two DWI
    splats pushed off-grid, pooled over both b-values.
    """

    images: dict[str, Image2D]
    params: EpiParams
    dropped_fraction: float


def simulate_pair(clean: Mapping[str, Image2D], field: Image2D, p: EpiParams,
                  dwi_params: DwiParams = DwiParams()) -> SimulatedPair:
    """Distort one co-registered clean slice with one acquisition.

    ``clean`` needs keys "b50", "adc", "t2w" and optionally "mask".  The
    clean high-b image is synthesized from the clean b50 and ADC, both
    DWIs are splatted, and the distorted ADC is recomputed from the two
    distorted DWIs (a derived map inherits distortion the same way a
    scanner-computed one would).  The T2W image passes through
    undistorted: it is the anatomical reference.  The saved clean ADC is
    recomputed from the saved clean DWIs so the stored triplet is
    self-consistent under the mono-exponential relation.
    """
    for key in ("b50", "adc", "t2w"):
        if key not in clean:
            raise KeyError(f"clean inputs missing {key!r}")
    require_same_geometry(clean["b50"], clean["adc"], clean["t2w"], field)

    vdm = compute_vdm(field, p)
    clean_b50 = clean["b50"]
    clean_b1400 = synth_high_b(clean_b50, clean["adc"], dwi_params)
    clean_adc = compute_adc(clean_b50, clean_b1400, dwi_params)

    dist_b50, drop_lo = _splat_with_loss(clean_b50, vdm)
    dist_b1400, drop_hi = _splat_with_loss(clean_b1400, vdm)
    dist_adc = compute_adc(dist_b50, dist_b1400, dwi_params)
    dist_adc = Image2D(dist_adc.pixels, ImageKind.ADC, dist_adc.spacing_mm,
                       pe_axis=p.pe_axis)

    mass_lo = float(np.sum(np.abs(clean_b50.pixels.astype(np.float64))))
    mass_hi = float(np.sum(np.abs(clean_b1400.pixels.astype(np.float64))))
    pooled = ((drop_lo * mass_lo + drop_hi * mass_hi) / (mass_lo + mass_hi)
              if mass_lo + mass_hi > 0 else 0.0)

    images = {
        "clean/b50": clean_b50,
        "clean/b1400": clean_b1400,
        "clean/adc": clean_adc,
        "clean/t2w": clean["t2w"],
        "distorted/b50": dist_b50,
        "distorted/b1400": dist_b1400,
        "distorted/adc": dist_adc,
        "truth/field_hz": field,
        "truth/vdm_px": vdm,
    }
    if "mask" in clean:
        images["clean/mask"] = clean["mask"]
    return SimulatedPair(images=images, params=p, dropped_fraction=pooled)
