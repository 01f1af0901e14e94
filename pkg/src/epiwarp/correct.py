"""Classical inverse methods for PE-axis distortion.

Three routes, in increasing order of how little they are given:

* :func:`unwarp_fieldmap` - the true displacement map is known; resample
  the distorted image at the shifted position and undo the intensity
  change with the local Jacobian.  Folded regions (where the forward map
  is not invertible) are flagged in a confidence mask and filled from
  the nearest trustworthy pixel along the PE line.
* :func:`restore_dual_pe` - the displacement map is known and two
  acquisitions with opposite PE polarity exist; per PE line, invert the
  pair of discrete splat operators jointly by regularized least squares
  (banded normal equations).
* :func:`estimate_field_dual_pe` - only the opposite-polarity pair is
  given; recover the displacement map itself by coarse-to-fine
  Gauss-Newton on a control-grid parameterization.

Displacement acts along one axis only, so every solve factorizes per PE
line into a small banded system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded
from scipy.ndimage import zoom as ndzoom

from .forward import EpiParams
from .imgio import Image2D, ImageKind, PeAxis, require_same_geometry

__all__ = [
    "RestoreOptions",
    "UnwarpResult",
    "FieldEstimate",
    "IllPosedColumnError",
    "unwarp_fieldmap",
    "restore_dual_pe",
    "estimate_field_dual_pe",
]


class IllPosedColumnError(ValueError):
    """The dual-PE normal equations are singular on some PE lines.

    Happens with lambda_smooth == 0 when folding maps several source
    pixels onto identical targets (rank loss).  ``columns`` lists the
    offending PE-line indices.
    """

    def __init__(self, columns: list[int]):
        self.columns = list(columns)
        super().__init__(
            f"normal equations singular on {len(self.columns)} PE line(s): "
            f"{self.columns[:12]}{'...' if len(self.columns) > 12 else ''}"
        )


@dataclass(frozen=True)
class RestoreOptions:
    """Solver knobs shared by the inverse methods.

    lambda_smooth is relative to unit-normalized intensities; the
    estimator rescales it against the local curvature so the same
    default works for both solvers.
    """

    lambda_smooth: float = 0.05
    invertibility_eps: float = 0.05
    max_iters: int = 50
    tol: float = 1e-8
    pyramid_levels: int = 4
    control_spacing_px: float = 8.0

    def __post_init__(self) -> None:
        if self.lambda_smooth < 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.max_iters < 1 or self.tol < 0 or self.control_spacing_px <= 1:
            raise ValueError("invalid iteration controls")


@dataclass
class UnwarpResult:
    restored: Image2D
    confidence_mask: Image2D


@dataclass
class FieldEstimate:
    """Estimator output: the displacement map plus solve diagnostics."""

    vdm: Image2D
    converged: bool
    history: list[float] = field(default_factory=list)


def _pe_first(a: np.ndarray, axis: int) -> np.ndarray:
    return a if axis == 0 else a.T


def _require_vdm(vdm: Image2D) -> int:
    vdm.validate()
    if vdm.kind is not ImageKind.VDM_PX:
        raise ValueError(f"expected a vdm_px map, got {vdm.kind.value}")
    return vdm.pe_axis.index


def _sample_lines(img: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation of each column of ``img`` at row positions ``pos``.

    Returns (values, validity); out-of-range positions give value 0 and
    validity 0.
    """
    n, m = img.shape
    lo = np.floor(pos)
    w = pos - lo
    lo_i = np.clip(lo.astype(np.int64), 0, n - 1)
    hi_i = np.clip(lo_i + 1, 0, n - 1)
    cols = np.broadcast_to(np.arange(m, dtype=np.int64), pos.shape)
    vals = img[lo_i, cols] * (1.0 - w) + img[hi_i, cols] * w
    valid = (pos >= 0.0) & (pos <= n - 1.0)
    return vals * valid, valid


def _nearest_fill(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries by the nearest valid one along axis 0.

    Ties go to the earlier (lower-index) neighbor; lines with no valid
    entry are filled with 0.
    """
    n, m = values.shape
    rows = np.arange(n, dtype=np.int64)[:, None]
    prev = np.where(valid, rows, -1)
    prev = np.maximum.accumulate(prev, axis=0)
    nxt = np.where(valid, rows, 2 * n)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]

    d_prev = np.where(prev >= 0, rows - prev, np.iinfo(np.int64).max)
    d_next = np.where(nxt < 2 * n, nxt - rows, np.iinfo(np.int64).max)
    pick_prev = d_prev <= d_next
    src = np.where(pick_prev, np.clip(prev, 0, n - 1), np.clip(nxt, 0, n - 1))
    cols = np.broadcast_to(np.arange(m, dtype=np.int64), values.shape)
    filled = values[src, cols]
    none_valid = (prev < 0) & (nxt >= 2 * n)
    return np.where(none_valid, 0.0, filled)


def unwarp_fieldmap(distorted: Image2D, vdm: Image2D,
                    opts: RestoreOptions = RestoreOptions()) -> UnwarpResult:
    """Invert the known displacement by resampling + Jacobian modulation.

    For each undistorted pixel x the signal was deposited at x + d(x),
    scaled by the density change; restoration reads the distorted image
    there and multiplies by |1 + d'(x)|.  Where 1 + d'(x) <=
    invertibility_eps the forward map folds and the true signal is
    unrecoverable: those pixels (and ones whose source lies outside the
    grid) get confidence 0 and a nearest-valid fill along the PE line.
    """
    distorted.validate()
    axis = _require_vdm(vdm)
    require_same_geometry(distorted, vdm)

    img = _pe_first(distorted.pixels.astype(np.float64), axis)
    d = _pe_first(vdm.pixels.astype(np.float64), axis)
    n = img.shape[0]

    jac = 1.0 + np.gradient(d, axis=0)
    pos = np.arange(n, dtype=np.float64)[:, None] + d
    vals, in_rng = _sample_lines(img, pos)
    restored = vals * np.abs(jac)
    valid = in_rng & (jac > opts.invertibility_eps)
    restored = np.where(valid, restored, _nearest_fill(restored, valid))

    restored = _pe_first(restored, axis)
    conf = _pe_first(valid.astype(np.float32), axis)
    return UnwarpResult(
        restored=distorted.with_pixels(restored.astype(np.float32), pe_axis=None),
        confidence_mask=Image2D(conf, ImageKind.MASK, distorted.spacing_mm),
    )


# --------------------------------------------------------------------------
# Dual-PE least squares with a known displacement map
# --------------------------------------------------------------------------


def _splat_operator(shifts: np.ndarray) -> sparse.csr_matrix:
    """Discrete splat matrix A for one PE line: A @ clean == distorted."""
    n = shifts.size
    src = np.arange(n, dtype=np.int64)
    pos = src + shifts
    lo = np.floor(pos).astype(np.int64)
    w_hi = pos - lo
    rows = np.concatenate([lo, lo + 1])
    cols = np.concatenate([src, src])
    wts = np.concatenate([1.0 - w_hi, w_hi])
    keep = (rows >= 0) & (rows < n)
    return sparse.csr_matrix(
        (wts[keep], (rows[keep], cols[keep])), shape=(n, n)
    )


def _first_difference_gram(n: int) -> sparse.csr_matrix:
    d = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    return (d.T @ d).tocsr()


def restore_dual_pe(img_plus: Image2D, img_minus: Image2D, vdm: Image2D,
                    opts: RestoreOptions = RestoreOptions()) -> Image2D:
    """Joint inversion of an opposite-polarity pair with a known map.

    Per PE line, with A+ and A- the splat operators of +vdm and -vdm,
    solves  min_u ||A+ u - I+||^2 + ||A- u - I-||^2 + lambda ||D u||^2
    through the banded normal equations and clamps the result at 0.
    ``vdm`` is the displacement of the plus acquisition.

    With vdm == 0 and lambda == 0 the system is diagonal and the result
    is exactly the pixelwise mean of the inputs.
    """
    img_plus.validate()
    img_minus.validate()
    axis = _require_vdm(vdm)
    require_same_geometry(img_plus, img_minus, vdm)

    ip = _pe_first(img_plus.pixels.astype(np.float64), axis)
    im = _pe_first(img_minus.pixels.astype(np.float64), axis)
    d = _pe_first(vdm.pixels.astype(np.float64), axis)
    n, m = ip.shape
    lam = opts.lambda_smooth
    gram_d = _first_difference_gram(n)

    out = np.zeros((n, m), dtype=np.float64)
    bad_cols: list[int] = []
    for c in range(m):
        a_plus = _splat_operator(d[:, c])
        a_minus = _splat_operator(-d[:, c])
        mat = (a_plus.T @ a_plus + a_minus.T @ a_minus).tocsr()
        if lam > 0:
            mat = (mat + lam * gram_d).tocsr()
        rhs = a_plus.T @ ip[:, c] + a_minus.T @ im[:, c]

        coo = mat.tocoo()
        nz = coo.data != 0
        bw = int(np.max(np.abs(coo.row[nz] - coo.col[nz]))) if nz.any() else 0
        if bw == 0:
            diag = mat.diagonal()
            if np.any(diag <= 0):
                bad_cols.append(c)
                continue
            out[:, c] = rhs / diag
            continue
        ab = np.zeros((bw + 1, n))
        for k in range(bw + 1):
            ab[k, : n - k] = mat.diagonal(-k)
        try:
            out[:, c] = solveh_banded(ab, rhs, lower=True)
        except np.linalg.LinAlgError:
            bad_cols.append(c)

    if bad_cols:
        raise IllPosedColumnError(bad_cols)
    out = np.maximum(out, 0.0)
    return img_plus.with_pixels(
        _pe_first(out, axis).astype(np.float32), pe_axis=None
    )


# --------------------------------------------------------------------------
# Dual-PE field estimation (no displacement map given)
# --------------------------------------------------------------------------


def _downsample2(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    a = a[: h - h % 2, : w - w % 2]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


class _ControlGrid:
    """Bilinear displacement parameterization on a regular node grid."""

    def __init__(self, shape: tuple[int, int], spacing: float):
        self.shape = shape
        self.nodes_r = max(2, int(round((shape[0] - 1) / spacing)) + 1)
        self.nodes_c = max(2, int(round((shape[1] - 1) / spacing)) + 1)
        self.coords_r = np.linspace(0.0, shape[0] - 1.0, self.nodes_r)
        self.coords_c = np.linspace(0.0, shape[1] - 1.0, self.nodes_c)

        rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        tr = rr / (shape[0] - 1.0) * (self.nodes_r - 1)
        tc = cc / (shape[1] - 1.0) * (self.nodes_c - 1)
        i0 = np.clip(np.floor(tr).astype(np.int64), 0, self.nodes_r - 2)
        j0 = np.clip(np.floor(tc).astype(np.int64), 0, self.nodes_c - 2)
        fr = tr - i0
        fc = tc - j0
        # per-pixel node linear indices and bilinear weights, 4 corners
        self.node_idx = [
            i0 * self.nodes_c + j0,
            i0 * self.nodes_c + (j0 + 1),
            (i0 + 1) * self.nodes_c + j0,
            (i0 + 1) * self.nodes_c + (j0 + 1),
        ]
        self.weights = [
            (1 - fr) * (1 - fc),
            (1 - fr) * fc,
            fr * (1 - fc),
            fr * fc,
        ]
        self.n_nodes = self.nodes_r * self.nodes_c
        self.gram = self._difference_gram()

    def _difference_gram(self) -> np.ndarray:
        nr, nc = self.nodes_r, self.nodes_c
        idx = np.arange(nr * nc).reshape(nr, nc)
        pairs = []
        pairs += [(idx[i, j], idx[i + 1, j]) for i in range(nr - 1) for j in range(nc)]
        pairs += [(idx[i, j], idx[i, j + 1]) for i in range(nr) for j in range(nc - 1)]
        gram = np.zeros((nr * nc, nr * nc))
        for a, b in pairs:
            gram[a, a] += 1.0
            gram[b, b] += 1.0
            gram[a, b] -= 1.0
            gram[b, a] -= 1.0
        return gram

    def dense(self, c: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.float64)
        for idx, w in zip(self.node_idx, self.weights):
            out += w * c[idx]
        return out

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """B^T @ values for a dense pixel field."""
        out = np.zeros(self.n_nodes, dtype=np.float64)
        for idx, w in zip(self.node_idx, self.weights):
            np.add.at(out, idx.ravel(), (w * values).ravel())
        return out

    def normal_matrix(self, diag_weights: np.ndarray) -> np.ndarray:
        """B^T diag(dw) B for a dense per-pixel weight field."""
        mat = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        for ia, wa in zip(self.node_idx, self.weights):
            for ib, wb in zip(self.node_idx, self.weights):
                np.add.at(
                    mat,
                    (ia.ravel(), ib.ravel()),
                    (diag_weights * wa * wb).ravel(),
                )
        return mat

    def fit(self, dense_d: np.ndarray) -> np.ndarray:
        """Control values by sampling the dense field at the node coords."""
        rr, cc = np.meshgrid(self.coords_r, self.coords_c, indexing="ij")
        i0 = np.clip(np.floor(rr).astype(np.int64), 0, self.shape[0] - 2)
        j0 = np.clip(np.floor(cc).astype(np.int64), 0, self.shape[1] - 2)
        fr = rr - i0
        fc = cc - j0
        v = (
            dense_d[i0, j0] * (1 - fr) * (1 - fc)
            + dense_d[i0, j0 + 1] * (1 - fr) * fc
            + dense_d[i0 + 1, j0] * fr * (1 - fc)
            + dense_d[i0 + 1, j0 + 1] * fr * fc
        )
        return v.ravel()


def _symmetric_objective(ip: np.ndarray, im: np.ndarray, gp: np.ndarray,
                         gm: np.ndarray, d: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Residual, gradient factor, validity, and data objective at d.

    The model: the plus image is the clean one pushed by +d (intensity
    scaled by 1 + d'), the minus image by -d.  Matching the two warped
    back to clean coordinates gives the residual
    r = I+(x + d)(1 + d') - I-(x - d)(1 - d').
    """
    n = ip.shape[0]
    dp = np.gradient(d, axis=0)
    base = np.arange(n, dtype=np.float64)[:, None]
    sp, vp = _sample_lines(ip, base + d)
    sm, vm = _sample_lines(im, base + (-d))
    gsp, _ = _sample_lines(gp, base + d)
    gsm, _ = _sample_lines(gm, base + (-d))
    jp = 1.0 + dp
    jm = 1.0 - dp
    w = (vp & vm).astype(np.float64)
    r = (sp * jp - sm * jm) * w
    g = (gsp * jp + gsm * jm) * w
    return r, g, w, float(np.sum(r * r))


def _estimate_level(ip: np.ndarray, im: np.ndarray, d0: np.ndarray,
                    opts: RestoreOptions, history: list[float]
                    ) -> tuple[np.ndarray, bool]:
    grid = _ControlGrid(ip.shape, opts.control_spacing_px)
    c = grid.fit(d0)
    gp = np.gradient(ip, axis=0)
    gm = np.gradient(im, axis=0)

    d = grid.dense(c)
    r, g, w, f_data = _symmetric_objective(ip, im, gp, gm, d)
    lam = opts.lambda_smooth * max(float(np.sum(g * g)) / grid.n_nodes, 1e-30)
    f = f_data + lam * float(c @ (grid.gram @ c))
    history.append(f)
    converged = True

    for _ in range(opts.max_iters):
        mat = grid.normal_matrix(g * g) + lam * grid.gram
        mat[np.diag_indices_from(mat)] += 1e-12 * max(np.trace(mat), 1.0)
        rhs = -(grid.scatter(g * r) + lam * (grid.gram @ c))
        try:
            step = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            converged = False
            break

        alpha = 1.0
        accepted = False
        for _ in range(8):
            c_try = c + alpha * step
            d_try = grid.dense(c_try)
            r_t, g_t, w_t, f_dt = _symmetric_objective(ip, im, gp, gm, d_try)
            f_try = f_dt + lam * float(c_try @ (grid.gram @ c_try))
            if f_try < f:
                c, d, r, g, w = c_try, d_try, r_t, g_t, w_t
                improvement = (f - f_try) / max(f, 1e-30)
                f = f_try
                history.append(f)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break  # no descent left at this scale
        if improvement < opts.tol:
            break
    else:
        converged = False  # max_iters exhausted without meeting tol

    return d, converged


def estimate_field_dual_pe(img_plus: Image2D, img_minus: Image2D,
                           epi_params: EpiParams | None = None,
                           opts: RestoreOptions = RestoreOptions()
                           ) -> FieldEstimate:
    """Estimate the displacement map from an opposite-polarity pair alone.

    Coarse-to-fine Gauss-Newton on a bilinear control grid, minimizing
    the symmetric warp mismatch (plus image pushed by +d, minus by -d)
    with a first-difference penalty on the control values.  Inputs are
    jointly intensity-normalized, so the estimate is invariant to a
    global scale; the construction is antisymmetric, so swapping the
    inputs negates the estimate exactly.
    """
    img_plus.validate()
    img_minus.validate()
    require_same_geometry(img_plus, img_minus)
    if (img_plus.pe_axis is not None and img_minus.pe_axis is not None
            and img_plus.pe_axis is not img_minus.pe_axis):
        raise ValueError(
            f"pe_axis mismatch: {img_plus.pe_axis.value} vs {img_minus.pe_axis.value}"
        )
    if epi_params is not None:
        pe_axis = epi_params.pe_axis
    elif img_plus.pe_axis is not None:
        pe_axis = img_plus.pe_axis
    else:
        raise ValueError("pe_axis unknown: pass epi_params or tag the images")

    axis = pe_axis.index
    ip = _pe_first(img_plus.pixels.astype(np.float64), axis)
    im = _pe_first(img_minus.pixels.astype(np.float64), axis)

    scale = 0.5 * (float(np.mean(np.abs(ip))) + float(np.mean(np.abs(im))))
    vdm_meta = dict(kind=ImageKind.VDM_PX, spacing_mm=img_plus.spacing_mm,
                    pe_axis=pe_axis)
    if scale == 0.0:
        zero = np.zeros_like(img_plus.pixels)
        return FieldEstimate(Image2D(zero, **vdm_meta), True, [0.0])
    ip = ip / scale
    im = im / scale

    # pyramid, coarsest first; keep the coarsest level at >= 2 control cells
    levels = [(ip, im)]
    min_dim = 2 * opts.control_spacing_px
    for _ in range(opts.pyramid_levels - 1):
        top_p, top_m = levels[-1]
        if min(top_p.shape) / 2 < min_dim:
            break
        levels.append((_downsample2(top_p), _downsample2(top_m)))
    levels.reverse()

    history: list[float] = []
    converged = True
    d = np.zeros(levels[0][0].shape, dtype=np.float64)
    for li, (lp, lm) in enumerate(levels):
        d, ok = _estimate_level(lp, lm, d, opts, history)
        converged = converged and ok
        if li + 1 < len(levels):
            nxt = levels[li + 1][0].shape
            factors = (nxt[0] / d.shape[0], nxt[1] / d.shape[1])
            d = ndzoom(d, factors, order=1) * 2.0

    d_full = _pe_first(d, axis).astype(np.float32)
    return FieldEstimate(Image2D(d_full, **vdm_meta), converged, history)
