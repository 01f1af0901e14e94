"""Diffusion signal model and the synthetic prostate phantom."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiwarp.dwi import (
    ADC_CLAMP_HIGH,
    BENIGN_ADC_RANGE,
    LESION_ADC_RANGE,
    DwiParams,
    LesionSpec,
    PhantomSpec,
    compute_adc,
    generate_phantom,
    random_phantom_spec,
    synth_high_b,
)
from epiwarp.imgio import FOV_MM, ImageKind

from support import make_image


# ---------------------------------------------------------------------------
# ADC computation
# ---------------------------------------------------------------------------

def test_adc_worked_value():
    # S_high = 1000 * exp(-1e-3 * 1350) = 1000 * e^-1.35 = 259.24
    lo = make_image(np.full((4, 4), 1000.0))
    adc = make_image(np.full((4, 4), 1.0e-3), kind="adc")
    hi = synth_high_b(lo, adc)
    assert hi.kind is ImageKind.DWI_B1400
    expected = 1000.0 * np.exp(-1.35)
    assert float(hi.pixels[0, 0]) == pytest.approx(expected, abs=1e-3)
    assert float(hi.pixels[0, 0]) == pytest.approx(259.24, abs=0.01)


def test_adc_log_ratio_value():
    lo = make_image(np.full((4, 4), 1000.0))
    hi = make_image(np.full((4, 4), 1000.0 * np.exp(-1.35)), kind="dwi_b1400")
    adc = compute_adc(lo, hi)
    np.testing.assert_allclose(adc.pixels, 1.0e-3, atol=1e-9)


def test_adc_round_trip_identity(rng):
    """compute_adc(synth_high_b(s, a)) == a away from floors and clamps."""
    p = DwiParams()
    lo = make_image(rng.uniform(0.2, 2.0, size=(32, 32)).astype(np.float32))
    adc_true = rng.uniform(3e-4, 3e-3, size=(32, 32)).astype(np.float32)
    hi = synth_high_b(lo, make_image(adc_true, kind="adc"), p)
    rec = compute_adc(lo, hi, p)
    np.testing.assert_allclose(rec.pixels, adc_true, atol=1e-5)


def test_adc_equal_signals_hits_floor():
    lo = make_image(np.full((3, 3), 0.7))
    adc = compute_adc(lo, lo)
    assert np.all(adc.pixels == np.float32(DwiParams().adc_floor))


def test_adc_zero_high_signal_clamps_high():
    lo = make_image(np.full((3, 3), 1.0))
    hi = make_image(np.zeros((3, 3)), kind="dwi_b1400")
    adc = compute_adc(lo, hi)
    assert np.all(np.isfinite(adc.pixels))
    assert np.all(adc.pixels == np.float32(ADC_CLAMP_HIGH))


def test_adc_zero_both_signals_is_finite():
    z = make_image(np.zeros((3, 3)))
    adc = compute_adc(z, z)
    assert np.all(np.isfinite(adc.pixels))
    assert np.all(adc.pixels == np.float32(DwiParams().adc_floor))


def test_high_b_never_exceeds_low_b(rng):
    lo = make_image(rng.uniform(0, 2, size=(16, 16)).astype(np.float32))
    adc = make_image(rng.uniform(0, 5e-3, size=(16, 16)).astype(np.float32), kind="adc")
    hi = synth_high_b(lo, adc)
    assert np.all(hi.pixels <= lo.pixels + 1e-7)
    assert np.all(hi.pixels >= 0.0)


def test_synth_high_b_rejects_negative_adc():
    lo = make_image(np.ones((3, 3)))
    bad = make_image(np.zeros((3, 3)), kind="t2w")
    bad.pixels[1, 1] = -1e-4
    with pytest.raises(ValueError):
        synth_high_b(lo, bad)


def test_adc_monotone_in_signal_ratio():
    lo = make_image(np.full((1, 5), 100.0))
    his = np.array([[90.0, 70.0, 50.0, 30.0, 10.0]], dtype=np.float32)
    adc = compute_adc(lo, make_image(his, kind="dwi_b1400")).pixels[0]
    assert np.all(np.diff(adc) > 0)


@settings(max_examples=60, deadline=None)
@given(
    s_lo=st.floats(min_value=0.0, max_value=1e4, allow_nan=False),
    s_hi=st.floats(min_value=0.0, max_value=1e4, allow_nan=False),
)
def test_adc_total_on_nonnegative_inputs(s_lo, s_hi):
    """Never NaN/Inf, always inside the clamp interval."""
    adc = compute_adc(
        make_image(np.full((2, 2), s_lo)),
        make_image(np.full((2, 2), s_hi), kind="dwi_b1400"),
    ).pixels
    assert np.all(np.isfinite(adc))
    assert np.all(adc >= np.float32(DwiParams().adc_floor))
    assert np.all(adc <= np.float32(ADC_CLAMP_HIGH))


def test_dwi_params_delta_b():
    assert DwiParams().delta_b == 1350.0
    assert DwiParams(b_low=0, b_high=1000).delta_b == 1000.0
    with pytest.raises(ValueError):
        DwiParams(b_low=1400, b_high=50)


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def test_phantom_outputs_and_geometry(phantom_64):
    assert set(phantom_64) == {"b50", "adc", "t2w", "mask"}
    for img in phantom_64.values():
        assert img.pixels.shape == (64, 64)
        assert img.spacing_mm[0] == pytest.approx(FOV_MM / 64)
    assert phantom_64["adc"].kind is ImageKind.ADC
    assert phantom_64["mask"].kind is ImageKind.MASK
    mask = phantom_64["mask"].pixels
    assert set(np.unique(mask)) <= {0.0, 1.0}
    # body occupies a plausible fraction of the FOV
    assert 0.1 < mask.mean() < 0.9


def test_phantom_deterministic():
    a = generate_phantom(random_phantom_spec(seed=11, size=48))
    b = generate_phantom(random_phantom_spec(seed=11, size=48))
    for role in a:
        assert a[role].pixels.tobytes() == b[role].pixels.tobytes()


def test_phantom_seed_changes_anatomy():
    a = generate_phantom(random_phantom_spec(seed=1, size=48, noise_sigma=0.0))
    b = generate_phantom(random_phantom_spec(seed=2, size=48, noise_sigma=0.0))
    assert a["b50"].pixels.tobytes() != b["b50"].pixels.tobytes()


def test_phantom_slices_share_subject():
    """Same seed, different slice: geometry shrinks away from the middle
    slice but the subject layout stays put."""
    mid = random_phantom_spec(seed=5, size=48, slice_index=2)
    edge = random_phantom_spec(seed=5, size=48, slice_index=0)
    assert mid.gland_center == edge.gland_center
    assert edge.gland_axes[0] < mid.gland_axes[0]


def test_phantom_noise_statistics():
    """Rician-like noise: same anatomy, different noise seeds differ with
    near-zero mean difference."""
    spec_a = random_phantom_spec(seed=3, size=64, noise_sigma=0.05, slice_index=0)
    spec_b = random_phantom_spec(seed=3, size=64, noise_sigma=0.05, slice_index=1)
    a = generate_phantom(spec_a)["t2w"].pixels.astype(np.float64)
    b = generate_phantom(spec_b)["t2w"].pixels.astype(np.float64)
    assert not np.array_equal(a, b)
    # slice scaling changes anatomy slightly; compare against per-image std
    assert abs(a.mean() - b.mean()) < 0.05


def test_phantom_noiseless_is_piecewise_smooth():
    spec = random_phantom_spec(seed=9, size=64, noise_sigma=0.0)
    img = generate_phantom(spec)["b50"].pixels
    assert np.all(img >= 0)
    # anti-aliased boundaries only: most pixels sit on a handful of plateaus
    hist, _ = np.histogram(img, bins=64)
    assert hist.max() > img.size * 0.2


def test_phantom_lesion_adc_lower_than_gland():
    # lesion centers/radii are in pixels, at the gland center here
    lesion = LesionSpec(center=(0.52 * 64, 0.5 * 64), radius=3.0, adc=0.6e-3)
    spec = PhantomSpec(size=64, lesions=(lesion,), noise_sigma=0.0)
    out = generate_phantom(spec)
    adc = out["adc"].pixels
    cy, cx = int(0.52 * 64), int(0.5 * 64)
    assert adc[cy, cx] == pytest.approx(0.6e-3, rel=0.05)
    assert adc[cy, cx] < spec.gland_adc
    # brighter than gland on b50, darker on t2w
    assert out["b50"].pixels[cy, cx] > spec.gland_intensity
    assert out["t2w"].pixels[cy, cx] < 0.5


def test_phantom_rectum_is_dark_void():
    spec = PhantomSpec(size=64, noise_sigma=0.0)
    out = generate_phantom(spec)
    cy, cx = int(0.76 * 64), int(0.5 * 64)
    assert out["b50"].pixels[cy, cx] < 0.05
    # the gas pocket sits inside the body, so it stays in the mask
    assert out["mask"].pixels[cy, cx] == 1.0


def test_phantom_guard_rails():
    with pytest.raises(ValueError):
        PhantomSpec(size=0)
    with pytest.raises(ValueError):
        PhantomSpec(gland_axes=(0.0, 0.2))
    with pytest.raises(ValueError):
        PhantomSpec(pz_fraction=1.5)
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-0.1)


def test_phantom_lesion_outside_gland_warns():
    lesion = LesionSpec(center=(0.05, 0.05), radius=0.02)
    spec = PhantomSpec(size=48, lesions=(lesion,), noise_sigma=0.0)
    with pytest.warns(UserWarning, match="outside"):
        generate_phantom(spec)


def test_random_spec_lesion_adcs_in_range():
    for seed in range(30):
        spec = random_phantom_spec(seed=seed, size=48)
        for les in spec.lesions:
            lo = LESION_ADC_RANGE[0]
            hi = BENIGN_ADC_RANGE[1]
            assert lo <= les.adc <= hi


def test_phantom_adc_values_in_physiologic_band(phantom_64):
    adc = phantom_64["adc"].pixels
    mask = phantom_64["mask"].pixels > 0.5
    assert adc[mask].min() >= 1e-5
    assert adc[mask].max() <= ADC_CLAMP_HIGH
