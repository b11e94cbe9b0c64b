"""Census/Hamming semi-global matching with per-pixel DIM energy.

The cost volume is stored with a per-pixel disparity offset, so the same SGM
recursion serves both the full-range search at the coarsest pyramid level and
the narrow bands searched at finer levels: slot ``k`` of pixel ``p`` holds
disparity ``offset[p] + k``.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DimensionMismatch, EmptyDisparityRange, ImageTooSmall, InputError, WindowTooLarge

log = logging.getLogger(__name__)

DIRECTIONS_8 = np.array(
    [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]], dtype=np.int64
)
DIRECTIONS_4 = DIRECTIONS_8[:4]


@dataclass(frozen=True)
class SgmParams:
    lambda_p1: int = 8
    lambda_p2: int = 32
    path_count: int = 8
    pyramid_levels: int = 4
    adaptive_p2: bool = True
    subpixel: bool = True

    def __post_init__(self):
        if not (0 <= self.lambda_p1 <= self.lambda_p2):
            raise InputError("SGM penalties must satisfy 0 <= lambda_p1 <= lambda_p2")
        if self.path_count not in (4, 8):
            raise InputError("path_count must be 4 or 8")
        if self.pyramid_levels < 1:
            raise InputError("pyramid_levels must be >= 1")

    @property
    def directions(self):
        return DIRECTIONS_8 if self.path_count == 8 else DIRECTIONS_4


@dataclass(frozen=True, eq=False)
class CensusMap:
    bits: np.ndarray   # (H, W) uint64, bit k = neighbour k darker than centre
    valid: np.ndarray  # (H, W) bool
    window: tuple[int, int]  # (w, h)

    @property
    def nbits(self):
        return self.window[0] * self.window[1] - 1

    @property
    def shape(self):
        return self.bits.shape

    def bit_tuple(self, row, col):
        b = int(self.bits[row, col])
        return tuple((b >> k) & 1 for k in range(self.nbits))


@dataclass(frozen=True, eq=False)
class CostVolume:
    cost: np.ndarray    # (H, W, D) uint16 Hamming distances, sentinel = nbits where invalid
    valid: np.ndarray   # (H, W, D) bool
    offset: np.ndarray  # (H, W) int32: disparity of slot 0
    d_min: int
    d_max: int
    nbits: int

    @property
    def shape(self):
        return self.cost.shape[:2]

    @property
    def ndisp(self):
        return self.cost.shape[2]

    @property
    def sentinel(self):
        return self.nbits

    def at(self, row, col, d):
        return int(self.cost[row, col, int(d) - int(self.offset[row, col])])


@dataclass(frozen=True, eq=False)
class DisparityMap:
    disparity: np.ndarray   # (H, W) float32, NaN = invalid
    dim_energy: np.ndarray  # (H, W) float32, NaN = invalid
    d_min: int
    d_max: int

    @property
    def shape(self):
        return self.disparity.shape

    @property
    def valid(self):
        return np.isfinite(self.disparity)


def _as_int_image(raster):
    return np.rint(np.asarray(raster, dtype=np.float64)).astype(np.int32)


def census_transform(raster, window=(9, 7), mask=None):
    """Census bitstrings over a ``window = (w, h)`` neighbourhood (both odd).

    Pixels whose window leaves the raster, or touches a pixel where ``mask``
    is false, are flagged invalid and carry an all-zero bitstring.
    """
    w, h = int(window[0]), int(window[1])
    img = _as_int_image(raster)
    H, W = img.shape
    if w % 2 == 0 or h % 2 == 0 or w < 1 or h < 1:
        raise InputError("census window dimensions must be odd")
    if w >= W or h >= H:
        raise WindowTooLarge(f"census window {w}x{h} does not fit a {W}x{H} raster")
    if w * h - 1 > 64:
        raise WindowTooLarge("census bitstrings are limited to 64 bits")
    valid = np.ones((H, W), bool) if mask is None else np.asarray(mask, bool)
    bits, ok = kernels.census(img, valid, h, w)
    return CensusMap(bits, ok, (w, h))


def matching_cost(census_left, census_right, d_range, offset=None):
    """Hamming cost volume ``cost(p, d) = H(census_l(p), census_r(p - (d, 0)))``.

    ``d_range = (d_min, d_max)`` is inclusive. With ``offset`` (an (H, W) int
    array) only the band ``offset .. offset + (d_max - d_min)`` is evaluated.
    """
    if census_left.shape[0] != census_right.shape[0] or census_left.shape != census_right.shape:
        raise DimensionMismatch("census maps must have equal shapes")
    d_min, d_max = int(d_range[0]), int(d_range[1])
    if d_max < d_min:
        raise EmptyDisparityRange(f"empty disparity range [{d_min}, {d_max}]")
    ndisp = d_max - d_min + 1
    if offset is None:
        offset = np.full(census_left.shape, d_min, np.int32)
    else:
        offset = np.ascontiguousarray(offset, dtype=np.int32)
    nbits = census_left.nbits
    cost, valid = kernels.hamming_cost(
        census_left.bits, census_left.valid, census_right.bits, census_right.valid, offset, ndisp, nbits
    )
    return CostVolume(cost, valid, offset, int(offset.min()), int(offset.max()) + ndisp - 1, nbits)


def aggregate(cost, params, guide=None, directions=None):
    """Path-summed SGM aggregate ``S(p, k)`` as an (H, W, D) int32 array."""
    dirs = params.directions if directions is None else np.asarray(directions, dtype=np.int64).reshape(-1, 2)
    adaptive = bool(params.adaptive_p2 and guide is not None)
    g = _as_int_image(guide) if guide is not None else np.zeros(cost.shape, np.int32)
    return kernels.sgm(
        np.ascontiguousarray(cost.cost), cost.offset, g,
        int(params.lambda_p1), int(params.lambda_p2), adaptive, dirs,
    )


def select_winners(S, cost, subpixel=True):
    """Lowest-disparity argmin of ``S`` with optional parabola refinement."""
    H, W, D = S.shape
    k = np.argmin(S, axis=2)
    rows, cols = np.indices((H, W))
    energy = S[rows, cols, k].astype(np.float64)
    ok = cost.valid[rows, cols, k]
    disp = (cost.offset + k).astype(np.float64)
    if subpixel and D >= 3:
        inner = (k > 0) & (k < D - 1)
        km = np.clip(k - 1, 0, D - 1)
        kp = np.clip(k + 1, 0, D - 1)
        sm = S[rows, cols, km].astype(np.float64)
        sp = S[rows, cols, kp].astype(np.float64)
        inner &= cost.valid[rows, cols, km] & cost.valid[rows, cols, kp]
        denom = sm - 2.0 * energy + sp
        refine = inner & (denom > 0)
        delta = np.zeros_like(disp)
        delta[refine] = (sm[refine] - sp[refine]) / (2.0 * denom[refine])
        disp = disp + delta
    disp = np.where(ok, disp, np.nan).astype(np.float32)
    energy = np.where(ok, energy, np.nan).astype(np.float32)
    return disp, energy


def sgm_aggregate(cost, params, guide=None, directions=None):
    """Semi-global aggregation and winner selection.

    ``guide`` (the left raster) enables the intensity-adaptive P2 when
    ``params.adaptive_p2`` is set; without it the penalties are fixed.
    ``directions`` overrides the path set (rows of ``(dx, dy)``).
    """
    S = aggregate(cost, params, guide, directions)
    disp, energy = select_winners(S, cost, params.subpixel)
    return DisparityMap(disp, energy, cost.d_min, cost.d_max)


def energy_total(disp, cost, params):
    """Global energy: data cost at each winner plus P1/P2 pair penalties.

    Neighbour pairs are the 4-neighbourhood, counted once; a pair whose
    disparities differ by less than 0.5 px costs nothing, by less than 1.5 px
    costs ``lambda_p1``, otherwise ``lambda_p2``. Invalid pixels are skipped.
    """
    d = np.asarray(disp.disparity, dtype=np.float64)
    if d.shape != cost.shape:
        raise DimensionMismatch(f"disparity map {d.shape} vs cost volume {cost.shape}")
    ok = np.isfinite(d)
    k = np.rint(np.where(ok, d, 0.0)).astype(np.int64) - cost.offset
    ok &= (k >= 0) & (k < cost.ndisp)
    rows, cols = np.nonzero(ok)
    data = float(cost.cost[rows, cols, k[rows, cols]].astype(np.float64).sum())
    p1, p2 = float(params.lambda_p1), float(params.lambda_p2)
    smooth = 0.0
    for a, b, va, vb in (
        (d[:, :-1], d[:, 1:], ok[:, :-1], ok[:, 1:]),
        (d[:-1, :], d[1:, :], ok[:-1, :], ok[1:, :]),
    ):
        both = va & vb
        diff = np.abs(a[both] - b[both])
        smooth += p1 * np.count_nonzero((diff >= 0.5) & (diff < 1.5)) + p2 * np.count_nonzero(diff >= 1.5)
    return data + smooth


# --------------------------------------------------------------------------- hierarchy


def _downsample(img, mask):
    blurred = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), 1.0, mode="nearest")
    small = blurred[::2, ::2]
    m = mask
    H2, W2 = small.shape
    mm = np.ones((H2, W2), bool)
    for dy in (0, 1):
        for dx in (0, 1):
            sub = m[dy::2, dx::2]
            pad = np.zeros((H2, W2), bool)
            pad[: sub.shape[0], : sub.shape[1]] = sub
            mm &= pad
    return small, mm


def _fill_invalid(disp):
    ok = np.isfinite(disp)
    if ok.all():
        return disp
    if not ok.any():
        return None
    _, (iy, ix) = ndimage.distance_transform_edt(~ok, return_indices=True)
    return disp[iy, ix]


def match_level(left, right, left_mask, right_mask, d_range, params, window, offset=None):
    cl = census_transform(left, window, left_mask)
    cr = census_transform(right, window, right_mask)
    cost = matching_cost(cl, cr, d_range, offset)
    return sgm_aggregate(cost, params, guide=left)


def hierarchical_match(left, right, d_range, params, left_mask=None, right_mask=None,
                       window=(9, 7), search_band=4):
    """Coarse-to-fine SGM over a Gaussian 2x pyramid.

    The coarsest level searches the full (scaled) range; each finer level only
    searches ``+/- search_band`` pixels around the doubled coarse disparity.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise DimensionMismatch("rectified images must have equal shapes")
    lm = np.ones(left.shape, bool) if left_mask is None else np.asarray(left_mask, bool)
    rm = np.ones(right.shape, bool) if right_mask is None else np.asarray(right_mask, bool)
    levels = params.pyramid_levels
    d_min, d_max = int(d_range[0]), int(d_range[1])
    if d_max < d_min:
        raise EmptyDisparityRange(f"empty disparity range [{d_min}, {d_max}]")
    if levels == 1:
        return match_level(left, right, lm, rm, (d_min, d_max), params, window)
    if left.shape[1] >> (levels - 1) < 32:
        raise ImageTooSmall(
            f"{left.shape[1]} px wide image leaves fewer than 32 px at pyramid level {levels - 1}"
        )

    pyramid = [(left, right, lm, rm)]
    for _ in range(levels - 1):
        l, r, a, b = pyramid[-1]
        l2, a2 = _downsample(l, a)
        r2, b2 = _downsample(r, b)
        pyramid.append((l2, r2, a2, b2))

    disp = None
    for level in range(levels - 1, -1, -1):
        l, r, a, b = pyramid[level]
        scale = 2 ** level
        lo = int(np.floor(d_min / scale))
        hi = int(np.ceil(d_max / scale))
        coarse = None if disp is None else _fill_invalid(disp.disparity.astype(np.float64))
        if coarse is None or hi - lo <= 2 * search_band:
            result = match_level(l, r, a, b, (lo, hi), params, window)
        else:
            H, W = l.shape
            up = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)
            upf = np.empty((H, W))
            hh, ww = min(H, up.shape[0]), min(W, up.shape[1])
            upf[:hh, :ww] = up[:hh, :ww]
            if ww < W:
                upf[:, ww:] = upf[:, ww - 1:ww]
            if hh < H:
                upf[hh:, :] = upf[hh - 1:hh, :]
            center = np.rint(2.0 * upf).astype(np.int64)
            offset = np.clip(center - search_band, lo, hi - 2 * search_band).astype(np.int32)
            result = match_level(l, r, a, b, (0, 2 * search_band), params, window, offset)
            result = DisparityMap(result.disparity, result.dim_energy, lo, hi)
        disp = result
    return disp
