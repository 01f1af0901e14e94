"""B0 off-resonance field maps: analytic generation, band-limiting, perturbation.

Fields come from in-plane dipole sources (metal implants outside the
anatomy) plus a linear background ramp.  A total-order-bounded 2D
polynomial basis splits any field into low-order structure, high-order
detail, and a residual; new fields are synthesized by keeping the low
orders verbatim and rescaling the rest under a seeded RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .imgio import Image2D, ImageKind

__all__ = [
    "FIELD_CAP_HZ",
    "HarmonicCoeffs",
    "DipoleSpec",
    "fit_harmonic",
    "eval_harmonic",
    "decompose_field",
    "synthesize_field",
    "dipole_phantom_field",
]

#: Default post-synthesis magnitude cap in Hz.  Keeps displacements within
#: a few tens of pixels at typical ssEPI parameters.
FIELD_CAP_HZ = 3000.0

#: Radius (px) below which the dipole radial factor is frozen, so field
#: values stay finite at and around each source.
DIPOLE_CLAMP_PX = 2.0


def _basis_exponents(max_order: int) -> list[tuple[int, int]]:
    """(i, j) exponent pairs with i + j <= max_order, grouped by total order."""
    return [(o - j, j) for o in range(max_order + 1) for j in range(o + 1)]


def n_basis(max_order: int) -> int:
    return (max_order + 1) * (max_order + 2) // 2


@dataclass(frozen=True)
class HarmonicCoeffs:
    """Coefficients of the 2D polynomial basis x^i y^j, i + j <= max_order.

    Coordinates are the image grid normalized to [-1, 1] per axis, so the
    fit is well conditioned and coefficients transfer between images of
    the same shape.  Ordering follows :func:`_basis_exponents`.
    """

    max_order: int
    coeffs: np.ndarray
    basis: str = "polynomial2d"

    def __post_init__(self) -> None:
        if self.max_order < 0:
            raise ValueError(f"max_order must be >= 0, got {self.max_order}")
        if self.basis != "polynomial2d":
            raise ValueError(f"unknown basis {self.basis!r}")
        object.__setattr__(
            self, "coeffs", np.asarray(self.coeffs, dtype=np.float64).ravel()
        )
        if self.coeffs.size != n_basis(self.max_order):
            raise ValueError(
                f"need {n_basis(self.max_order)} coefficients for order "
                f"{self.max_order}, got {self.coeffs.size}"
            )

    def orders(self) -> np.ndarray:
        """Total order i + j of each coefficient."""
        return np.array([i + j for i, j in _basis_exponents(self.max_order)])


def _norm_coords(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    y = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    x = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    return np.meshgrid(y, x, indexing="ij")


def _design_matrix(shape: tuple[int, int], max_order: int,
                   keep: np.ndarray | None = None) -> np.ndarray:
    yy, xx = _norm_coords(shape)
    if keep is not None:
        yy, xx = yy[keep], xx[keep]
    cols = [xx.ravel() ** i * yy.ravel() ** j
            for i, j in _basis_exponents(max_order)]
    return np.stack(cols, axis=1)


def fit_harmonic(field: Image2D, max_order: int,
                 mask: Image2D | None = None) -> HarmonicCoeffs:
    """Least-squares polynomial fit over unmasked pixels.

    Raises ValueError when fewer unmasked pixels than basis functions
    remain (underdetermined fit).
    """
    field.validate()
    if max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    keep = None
    if mask is not None:
        if mask.pixels.shape != field.pixels.shape:
            raise ValueError("mask geometry differs from field")
        keep = mask.pixels > 0.5
        if int(keep.sum()) < n_basis(max_order):
            raise ValueError(
                f"mask leaves {int(keep.sum())} pixels for "
                f"{n_basis(max_order)} basis functions: underdetermined"
            )
    a = _design_matrix(field.pixels.shape, max_order, keep)
    b = field.pixels.astype(np.float64)
    b = b[keep] if keep is not None else b.ravel()
    coeffs, *_ = np.linalg.lstsq(a, b, rcond=None)
    return HarmonicCoeffs(max_order=max_order, coeffs=coeffs)


def eval_harmonic(coeffs: HarmonicCoeffs, shape: tuple[int, int],
                  spacing_mm: tuple[float, float] = (1.0, 1.0),
                  order_mask: np.ndarray | None = None) -> Image2D:
    """Evaluate (a subset of) the basis expansion on a grid.

    ``order_mask`` selects which coefficients participate (boolean, one
    per coefficient); all participate when omitted.
    """
    c = coeffs.coeffs
    if order_mask is not None:
        c = np.where(order_mask, c, 0.0)
    a = _design_matrix(shape, coeffs.max_order)
    vals = (a @ c).reshape(shape)
    return Image2D(vals.astype(np.float32), ImageKind.FIELD_HZ, spacing_mm)


def decompose_field(field: Image2D, max_order: int,
                    mask: Image2D | None = None
                    ) -> tuple[HarmonicCoeffs, Image2D]:
    """Fit + residual in one step: field == eval(coeffs) + residual."""
    coeffs = fit_harmonic(field, max_order, mask)
    recon = eval_harmonic(coeffs, field.pixels.shape, field.spacing_mm)
    residual = field.with_pixels(
        field.pixels.astype(np.float64) - recon.pixels.astype(np.float64)
    )
    return coeffs, residual


def synthesize_field(coeffs: HarmonicCoeffs, residual: Image2D,
                     low_keep_order: int = 2,
                     hi_scale_range: tuple[float, float] = (0.5, 2.0),
                     seed: int = 0,
                     cap_hz: float = FIELD_CAP_HZ) -> Image2D:
    """Perturbed reconstruction: low orders verbatim, the rest rescaled.

    Every coefficient of total order above ``low_keep_order`` and the
    residual image each get an independent uniform scale from
    ``hi_scale_range`` (one draw per coefficient in basis order, then one
    for the residual).  Deterministic per seed; output clamped to
    ``cap_hz`` magnitude.
    """
    if low_keep_order > coeffs.max_order:
        raise ValueError(
            f"low_keep_order {low_keep_order} exceeds fitted order {coeffs.max_order}"
        )
    lo, hi = float(hi_scale_range[0]), float(hi_scale_range[1])
    if not (0.0 <= lo <= hi <= 4.0):
        raise ValueError(f"hi_scale_range {hi_scale_range} not within [0, 4]")
    residual.validate()

    orders = coeffs.orders()
    hi_idx = np.flatnonzero(orders > low_keep_order)
    rng = np.random.default_rng(seed)
    scales = rng.uniform(lo, hi, size=hi_idx.size + 1)

    c = coeffs.coeffs.copy()
    c[hi_idx] *= scales[:-1]
    recon = eval_harmonic(
        HarmonicCoeffs(coeffs.max_order, c),
        residual.pixels.shape, residual.spacing_mm,
    )
    out = (recon.pixels.astype(np.float64)
           + residual.pixels.astype(np.float64) * scales[-1])
    out = np.clip(out, -cap_hz, cap_hz)
    return Image2D(out.astype(np.float32), ImageKind.FIELD_HZ,
                   residual.spacing_mm)


@dataclass(frozen=True)
class DipoleSpec:
    """In-plane dipole sources plus a linear background ramp.

    centers: (row, col) in px, may lie outside the grid.
    moments: Hz * px^3 per center.
    orientations: per-center axis vector (row, col); normalized internally.
    background_hz_per_px: linear ramp (d/drow, d/dcol) in Hz/px, zero at
        the grid center.
    """

    centers: tuple[tuple[float, float], ...]
    moments: tuple[float, ...]
    orientations: tuple[tuple[float, float], ...]
    background_hz_per_px: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if len(self.centers) == 0:
            raise ValueError("need at least one dipole center")
        if not (len(self.centers) == len(self.moments) == len(self.orientations)):
            raise ValueError(
                f"length mismatch: {len(self.centers)} centers, "
                f"{len(self.moments)} moments, {len(self.orientations)} orientations"
            )
        for vec in self.orientations:
            if float(np.hypot(*vec)) < 1e-12:
                raise ValueError(f"orientation {vec} has zero length")

    def scaled(self, factor: float) -> "DipoleSpec":
        return DipoleSpec(
            centers=self.centers,
            moments=tuple(m * factor for m in self.moments),
            orientations=self.orientations,
            background_hz_per_px=tuple(
                g * factor for g in self.background_hz_per_px
            ),
        )


def dipole_phantom_field(spec: DipoleSpec, shape: tuple[int, int],
                         spacing_mm: tuple[float, float] = (1.0, 1.0)) -> Image2D:
    """Sum of in-plane point dipoles: m * (3 cos^2(theta) - 1) / rho^3.

    rho is the in-plane distance to the source (clamped below at 2 px so
    the singularity never enters the grid values), theta the angle
    between the displacement and the dipole axis.  Linear in the moments
    and exactly symmetric under mirrored specs.
    """
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    total = np.zeros((h, w), dtype=np.float64)
    for (cr, cc), m, orient in zip(spec.centers, spec.moments, spec.orientations):
        dr = rows - cr
        dc = cols - cc
        rho = np.hypot(dr, dc)
        axis = np.asarray(orient, dtype=np.float64)
        axis /= np.hypot(*axis)
        cos_theta = (dr * axis[0] + dc * axis[1]) / np.maximum(rho, 1e-12)
        rho_c = np.maximum(rho, DIPOLE_CLAMP_PX)
        total += m * (3.0 * cos_theta**2 - 1.0) / rho_c**3
    g_row, g_col = spec.background_hz_per_px
    total += g_row * (rows - (h - 1) / 2.0) + g_col * (cols - (w - 1) / 2.0)
    return Image2D(total.astype(np.float32), ImageKind.FIELD_HZ, spacing_mm)
