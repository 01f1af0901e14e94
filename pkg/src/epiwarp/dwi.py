"""Diffusion-signal relations and the synthetic pelvic phantom generator.

The signal model is mono-exponential with two b-values:
``S(b_high) = S(b_low) * exp(-ADC * (b_high - b_low))``.  Floors and
clamps keep every stage total, so no NaN/Inf can propagate into
generated data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .imgio import FOV_MM, GeometryMismatchError, Image2D, ImageKind, require_same_geometry

__all__ = [
    "DwiParams",
    "LesionSpec",
    "PhantomSpec",
    "compute_adc",
    "synth_high_b",
    "generate_phantom",
    "random_phantom_spec",
]

ADC_CLAMP_HIGH = 5e-3  # mm^2/s, upper clamp on computed ADC

# Plausible-physiology guard rails (mm^2/s)
LESION_ADC_RANGE = (0.4e-3, 1.2e-3)
BENIGN_ADC_RANGE = (1.2e-3, 2.2e-3)


@dataclass(frozen=True)
class DwiParams:
    """Two-point diffusion acquisition parameters."""

    b_low: float = 50.0        # s/mm^2
    b_high: float = 1400.0     # s/mm^2
    adc_floor: float = 1e-5    # mm^2/s
    signal_floor: float = 1e-6

    def __post_init__(self) -> None:
        if not self.b_high > self.b_low >= 0:
            raise ValueError(
                f"need b_high > b_low >= 0, got b_low={self.b_low}, b_high={self.b_high}"
            )
        if self.adc_floor <= 0 or self.signal_floor <= 0:
            raise ValueError("floors must be positive")

    @property
    def delta_b(self) -> float:
        return self.b_high - self.b_low


def compute_adc(s_low: Image2D, s_high: Image2D,
                p: DwiParams = DwiParams()) -> Image2D:
    """ADC map from a low-b / high-b pair.

    ADC = ln(max(S_low, floor) / max(S_high, floor)) / (b_high - b_low),
    clamped to [adc_floor, 5e-3] mm^2/s.  Total for any non-negative
    inputs: never NaN or Inf.
    """
    require_same_geometry(s_low, s_high)
    lo = np.maximum(s_low.pixels.astype(np.float64), p.signal_floor)
    hi = np.maximum(s_high.pixels.astype(np.float64), p.signal_floor)
    adc = np.log(lo / hi) / p.delta_b
    adc = np.clip(adc, p.adc_floor, ADC_CLAMP_HIGH)
    return Image2D(adc.astype(np.float32), kind=ImageKind.ADC,
                   spacing_mm=s_low.spacing_mm)


def synth_high_b(s_low: Image2D, adc: Image2D,
                 p: DwiParams = DwiParams()) -> Image2D:
    """High-b signal from the low-b signal and an ADC map.

    Inverse of :func:`compute_adc` away from its floor/clamp regions.
    """
    require_same_geometry(s_low, adc)
    if np.any(adc.pixels < 0):
        raise ValueError("adc map contains negative values")
    hi = s_low.pixels.astype(np.float64) * np.exp(
        -adc.pixels.astype(np.float64) * p.delta_b
    )
    return Image2D(hi.astype(np.float32), kind=ImageKind.DWI_B1400,
                   spacing_mm=s_low.spacing_mm)


# --------------------------------------------------------------------------
# Phantom generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LesionSpec:
    """A focal lesion: intensity bump on DWI, restricted diffusion on ADC."""

    center: tuple[float, float]      # (row, col) px
    radius: float                    # px
    intensity_mult: float = 1.6      # multiplier on b50 signal
    adc: float = 0.8e-3              # mm^2/s


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic pelvic slice.

    The slice contains a body oval, a prostate gland split into a
    posterior peripheral zone and an anterior transition zone, optional
    lesions, and a rectal gas pocket (signal void) behind the gland.
    """

    size: int = 128
    gland_center: tuple[float, float] = (0.52, 0.5)   # fractions of size (row, col)
    gland_axes: tuple[float, float] = (0.16, 0.21)    # fractions of size
    gland_intensity: float = 0.62                     # b50 signal in gland
    gland_adc: float = 1.5e-3                         # mm^2/s
    pz_fraction: float = 0.45        # posterior band of the gland
    pz_intensity_mult: float = 1.25
    pz_adc: float = 1.8e-3
    lesions: tuple[LesionSpec, ...] = ()
    rectum_center: tuple[float, float] = (0.76, 0.5)
    rectum_axes: tuple[float, float] = (0.085, 0.11)
    body_intensity: float = 0.28
    body_adc: float = 1.65e-3
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size < 16:
            raise ValueError(f"phantom size {self.size} too small")
        for name, axes in (("gland_axes", self.gland_axes),
                           ("rectum_axes", self.rectum_axes)):
            if min(axes) <= 0:
                raise ValueError(f"{name}={axes} must be positive")
        if not (0.0 <= self.pz_fraction <= 1.0):
            raise ValueError(f"pz_fraction={self.pz_fraction} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma={self.noise_sigma} must be >= 0")
        for les in self.lesions:
            if not (LESION_ADC_RANGE[0] <= les.adc <= LESION_ADC_RANGE[1]):
                raise ValueError(
                    f"lesion adc {les.adc} outside {LESION_ADC_RANGE} mm^2/s"
                )
        for name, val in (("gland_adc", self.gland_adc),
                          ("pz_adc", self.pz_adc),
                          ("body_adc", self.body_adc)):
            if not (BENIGN_ADC_RANGE[0] <= val <= BENIGN_ADC_RANGE[1]):
                raise ValueError(f"{name}={val} outside {BENIGN_ADC_RANGE} mm^2/s")

    @property
    def spacing_mm(self) -> tuple[float, float]:
        s = FOV_MM / self.size
        return (s, s)


def _soft_ellipse(rows: np.ndarray, cols: np.ndarray,
                  center: tuple[float, float], axes: tuple[float, float],
                  blur_px: float = 1.0) -> np.ndarray:
    """Anti-aliased ellipse coverage in [0, 1].

    Coverage ramps linearly over roughly ``blur_px`` pixels around the
    boundary, using the scaled implicit function as a distance proxy.
    """
    q = np.sqrt(((rows - center[0]) / axes[0]) ** 2
                + ((cols - center[1]) / axes[1]) ** 2)
    dist = (q - 1.0) * min(axes)  # approx signed distance in px
    return np.clip(0.5 - dist / max(blur_px, 1e-6), 0.0, 1.0)


def _blend(base: np.ndarray, value: float, coverage: np.ndarray) -> np.ndarray:
    return base * (1.0 - coverage) + value * coverage


def generate_phantom(spec: PhantomSpec) -> dict[str, Image2D]:
    """Synthesize one slice: returns {"b50", "adc", "t2w", "mask"}.

    Piecewise-smooth structures with anti-aliased boundaries; Rician-like
    noise on the signal images at ``noise_sigma``; deterministic per seed.
    Lesions centered outside the gland trigger a warning, not an error.
    """
    n = spec.size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    c = lambda fr: (fr[0] * n, fr[1] * n)
    a = lambda fr: (max(fr[0] * n, 1.0), max(fr[1] * n, 1.0))

    body_cov = _soft_ellipse(rows, cols, (0.5 * n, 0.5 * n),
                             (0.42 * n, 0.46 * n), blur_px=2.0)
    gland_cov = _soft_ellipse(rows, cols, c(spec.gland_center), a(spec.gland_axes))
    rectum_cov = _soft_ellipse(rows, cols, c(spec.rectum_center), a(spec.rectum_axes))

    # Posterior peripheral zone: lower band of the gland.
    pz_edge = (spec.gland_center[0] + (0.5 - spec.pz_fraction)
               * 2.0 * spec.gland_axes[0]) * n
    pz_band = np.clip((rows - pz_edge) / 2.0 + 0.5, 0.0, 1.0)
    pz_cov = gland_cov * pz_band

    b50 = np.zeros((n, n))
    b50 = _blend(b50, spec.body_intensity, body_cov)
    b50 = _blend(b50, spec.gland_intensity, gland_cov)
    b50 = _blend(b50, spec.gland_intensity * spec.pz_intensity_mult, pz_cov)

    adc = np.full((n, n), 1e-5)
    adc = _blend(adc, spec.body_adc, body_cov)
    adc = _blend(adc, spec.gland_adc, gland_cov)
    adc = _blend(adc, spec.pz_adc, pz_cov)

    # T2W: distinct contrast. Gland bright, PZ brighter, lesions dark.
    t2w = np.zeros((n, n))
    t2w = _blend(t2w, 0.35, body_cov)
    t2w = _blend(t2w, 0.65, gland_cov)
    t2w = _blend(t2w, 0.85, pz_cov)

    gland_q = (((rows - c(spec.gland_center)[0]) / a(spec.gland_axes)[0]) ** 2
               + ((cols - c(spec.gland_center)[1]) / a(spec.gland_axes)[1]) ** 2)
    for les in spec.lesions:
        ctr = (les.center[0], les.center[1])
        if gland_q[int(round(ctr[0])) % n, int(round(ctr[1])) % n] > 1.0:
            warnings.warn(
                f"lesion at {ctr} lies outside the gland", stacklevel=2
            )
        cov = _soft_ellipse(rows, cols, ctr, (les.radius, les.radius))
        b50 = _blend(b50, spec.gland_intensity * les.intensity_mult, cov)
        adc = _blend(adc, les.adc, cov)
        t2w = _blend(t2w, 0.3, cov)

    # Rectal gas pocket: void in everything.
    b50 = _blend(b50, 0.0, rectum_cov)
    adc = _blend(adc, 1e-5, rectum_cov)
    t2w = _blend(t2w, 0.05, rectum_cov)

    mask = (body_cov > 0.5).astype(np.float64)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        sig = spec.noise_sigma
        # Rician-like: magnitude of (signal + n1) + i*n2
        for img in (b50, t2w):
            n1 = rng.normal(0.0, sig, img.shape)
            n2 = rng.normal(0.0, sig, img.shape)
            img[...] = np.hypot(img + n1, n2)
        adc += rng.normal(0.0, sig * 0.3e-3, adc.shape)
        adc = np.clip(adc, 1e-5, ADC_CLAMP_HIGH)

    sp = spec.spacing_mm
    return {
        "b50": Image2D(b50.astype(np.float32), ImageKind.DWI_B50, sp),
        "adc": Image2D(adc.astype(np.float32), ImageKind.ADC, sp),
        "t2w": Image2D(t2w.astype(np.float32), ImageKind.T2W, sp),
        "mask": Image2D(mask.astype(np.float32), ImageKind.MASK, sp),
    }


def random_phantom_spec(seed: int, size: int = 128,
                        noise_sigma: float = 0.02,
                        slice_index: int = 0) -> PhantomSpec:
    """Randomized anatomy for one subject slice.

    The subject-level layout (gland geometry, lesion count/placement) is
    drawn from ``seed``; ``slice_index`` modulates the gland/rectum axes
    to mimic moving through the gland, and offsets the noise stream.
    """
    rng = np.random.default_rng(seed)
    g_center = (0.52 + rng.uniform(-0.03, 0.03), 0.5 + rng.uniform(-0.03, 0.03))
    g_axes = (rng.uniform(0.13, 0.19), rng.uniform(0.17, 0.24))
    # through-plane profile: axes shrink away from the central slice
    scale = 1.0 - 0.06 * abs(slice_index - 2)
    g_axes = (g_axes[0] * scale, g_axes[1] * scale)

    lesions = []
    for _ in range(rng.integers(0, 3)):
        ang = rng.uniform(0, 2 * np.pi)
        rad_fr = rng.uniform(0.2, 0.6)
        ctr = (
            (g_center[0] + np.sin(ang) * g_axes[0] * rad_fr) * size,
            (g_center[1] + np.cos(ang) * g_axes[1] * rad_fr) * size,
        )
        lesions.append(LesionSpec(
            center=ctr,
            radius=rng.uniform(0.015, 0.035) * size,
            intensity_mult=rng.uniform(1.3, 1.9),
            adc=rng.uniform(0.5e-3, 1.1e-3),
        ))

    return PhantomSpec(
        size=size,
        gland_center=g_center,
        gland_axes=g_axes,
        gland_intensity=rng.uniform(0.55, 0.7),
        gland_adc=rng.uniform(1.3e-3, 1.7e-3),
        pz_fraction=rng.uniform(0.35, 0.5),
        pz_intensity_mult=rng.uniform(1.15, 1.35),
        pz_adc=rng.uniform(1.6e-3, 2.0e-3),
        lesions=tuple(lesions),
        rectum_center=(0.76 + rng.uniform(-0.02, 0.02), 0.5 + rng.uniform(-0.04, 0.04)),
        rectum_axes=(rng.uniform(0.06, 0.11) * scale, rng.uniform(0.08, 0.14) * scale),
        body_intensity=rng.uniform(0.24, 0.32),
        body_adc=rng.uniform(1.5e-3, 1.8e-3),
        noise_sigma=noise_sigma,
        seed=int(rng.integers(0, 2**63)) + slice_index,
    )
