"""Image builders and independent oracles shared across test modules.

Lives outside conftest so tests can import these by module name
without colliding with other test trees' conftest files.
"""

from __future__ import annotations

import numpy as np

from epiwarp.imgio import Image2D


def make_image(pixels, kind="dwi_b50", spacing=1.0, pe_axis=None):
    arr = np.asarray(pixels, dtype=np.float32)
    return Image2D(
        pixels=arr,
        spacing_mm=(spacing, spacing),
        kind=kind,
        pe_axis=pe_axis,
    )


def smooth_bumps(shape, rng, n_blobs=6, amp=1.0):
    """Sum of broad gaussian blobs. Smooth enough that linear-interp
    resampling error is far below blob scale."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape, dtype=np.float64)
    for _ in range(n_blobs):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        sy = rng.uniform(h / 8.0, h / 4.0)
        sx = rng.uniform(w / 8.0, w / 4.0)
        a = rng.uniform(0.3, 1.0) * amp
        out += a * np.exp(-((yy - cy) ** 2 / (2 * sy**2) + (xx - cx) ** 2 / (2 * sx**2)))
    return out


def smooth_displacement(shape, rng, max_px=2.0, axis=0):
    """Smooth displacement field with |d| <= max_px and gentle gradient
    along `axis` so the warp never folds."""
    d = smooth_bumps(shape, rng, n_blobs=4, amp=1.0)
    d -= d.mean()
    peak = np.abs(d).max()
    if peak > 0:
        d *= max_px / peak
    # keep |dd/dx| well under 1 along the PE axis
    g = np.abs(np.gradient(d, axis=axis)).max()
    if g > 0.5:
        d *= 0.5 / g
    return d


# ---------------------------------------------------------------------------
# independent oracles (brute-force, scalar python; no shared code with src/)
# ---------------------------------------------------------------------------

def oracle_nmse(ref, test, mask=None):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    num = 0.0
    den = 0.0
    for i in range(ref.shape[0]):
        for j in range(ref.shape[1]):
            if mask is not None and not (mask[i, j] > 0.5):
                continue
            num += (test[i, j] - ref[i, j]) ** 2
            den += ref[i, j] ** 2
    return num / den


def oracle_psnr(ref, test, mask=None, peak=None):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    se = 0.0
    n = 0
    mx = -np.inf
    for i in range(ref.shape[0]):
        for j in range(ref.shape[1]):
            if mask is not None and not (mask[i, j] > 0.5):
                continue
            se += (test[i, j] - ref[i, j]) ** 2
            n += 1
            mx = max(mx, ref[i, j])
    mse = se / n
    if peak is None:
        peak = mx
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def oracle_field_rmse(true_px, est_px, mask=None):
    true_px = np.asarray(true_px, dtype=np.float64)
    est_px = np.asarray(est_px, dtype=np.float64)
    se = 0.0
    n = 0
    for i in range(true_px.shape[0]):
        for j in range(true_px.shape[1]):
            if mask is not None and not (mask[i, j] > 0.5):
                continue
            se += (est_px[i, j] - true_px[i, j]) ** 2
            n += 1
    return float(np.sqrt(se / n))


def oracle_splat_column(col, disp):
    """Reference splat of one PE line: scalar loop, two-neighbor linear
    deposit, float64. Deposits falling outside [0, n) are dropped."""
    col = np.asarray(col, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    n = col.shape[0]
    out = np.zeros(n, dtype=np.float64)
    dropped = 0.0
    for i in range(n):
        pos = i + disp[i]
        lo = int(np.floor(pos))
        w_hi = pos - lo
        w_lo = 1.0 - w_hi
        if 0 <= lo < n:
            out[lo] += col[i] * w_lo
        else:
            dropped += abs(col[i]) * w_lo
        if 0 <= lo + 1 < n:
            out[lo + 1] += col[i] * w_hi
        else:
            dropped += abs(col[i]) * w_hi
    return out, dropped
