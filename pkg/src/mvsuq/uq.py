"""Self-supervised matching uncertainty.

Multi-ray fused points serve as pseudo ground truth. Their reprojection
errors against each contributing pair's correspondence are binned by DIM
energy and a two-parameter Gamma model is fitted per bin. The resulting table
predicts error statistics for any point from its energy alone.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, polygamma

from .errors import DegenerateSamples, EmptyTable, NoSamples, NonPositiveDepth
from .geom import project

log = logging.getLogger(__name__)

ZERO_CLAMP = 1e-6


def reprojection_error(point, view, correspondence):
    """Pixel distance between ``point`` projected into ``view`` and ``correspondence``."""
    uv = project(point, view)
    return float(np.hypot(*(np.asarray(uv) - np.asarray(correspondence, dtype=np.float64))))


def reprojection_errors(points, view, correspondences):
    """Vectorised :func:`reprojection_error`.

    Raises:
        NonPositiveDepth: Any point at or behind the camera.
    """
    uv, z = view.project_many(points)
    if np.any(z <= 1e-12):
        raise NonPositiveDepth(f"{int((z <= 1e-12).sum())} points behind view {view.image_id}")
    d = uv - np.asarray(correspondences, dtype=np.float64)
    return np.hypot(d[:, 0], d[:, 1])


# --------------------------------------------------------------------------- sample collection


def self_projection_residual(cloud, views):
    """Distance between each point's projection into its base view and its base pixel."""
    out = np.full(len(cloud), np.nan)
    for img in np.unique(cloud.source_image):
        sel = np.nonzero(cloud.source_image == img)[0]
        uv, z = views[int(img)].project_many(cloud.positions[sel])
        px = cloud.source_pixel[sel][:, ::-1].astype(np.float64)
        r = np.hypot(*(uv - px).T)
        out[sel] = np.where(z > 1e-12, r, np.inf)
    return out


def select_pseudo_gt(cloud, views, min_rays=6, gate_px=1.0, warn_below=1000):
    """Indices of multi-ray points whose base-view self-projection is within ``gate_px``."""
    if min_rays < 3:
        raise ValueError("min_rays must be at least 3")
    idx = np.nonzero(cloud.num_rays >= min_rays)[0]
    if idx.size:
        resid = self_projection_residual(cloud.subset(idx), views)
        idx = idx[resid <= gate_px]
    if idx.size < warn_below:
        log.warning("only %d pseudo ground-truth points (>= %d rays); Gamma fits may be poor", idx.size, min_rays)
    return idx


@dataclass(frozen=True, eq=False)
class ReprojectionSamples:
    """Columnar reprojection samples: one row per (point, contributing pair)."""

    point: np.ndarray        # index into the cloud
    base_image: np.ndarray
    pixel: np.ndarray        # (N, 2) row, col
    neighbor: np.ndarray
    energy: np.ndarray
    error_px: np.ndarray

    def __len__(self):
        return len(self.error_px)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2), np.int64),
                       np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("point", "base_image", "pixel", "neighbor", "energy", "error_px")))


def _pair_lookup(cloud, index, pair_maps):
    """Yield ``(neighbor, rows into index, depth, energy)`` per contributing pair map."""
    src = cloud.source_image[index]
    pix = cloud.source_pixel[index]
    ids = cloud.pair_ids[index]
    for (base_id, nb_id) in sorted(pair_maps):
        dm = pair_maps[(base_id, nb_id)]
        hit = np.nonzero((src == base_id) & np.any(ids == nb_id, axis=1))[0]
        if hit.size == 0:
            continue
        r, c = pix[hit, 0], pix[hit, 1]
        yield nb_id, hit, dm.depth[r, c], dm.dim_energy[r, c]


def collect_samples(cloud, index, views, pair_maps):
    """Reprojection samples of the points ``index`` against their contributing pairs.

    The correspondence in neighbour ``j`` is the pair's own depth along the base
    ray, projected into ``j``; this is the matcher's match mapped back through
    the pair's rectification. Pairs with an invalid entry at the pixel are skipped.

    Args:
        cloud: Fused cloud with ``pair_ids``, ``source_image`` and ``source_pixel``.
        index: Indices of pseudo ground-truth points.
        views: Mapping image id to CameraView.
        pair_maps: Mapping ``(base_id, neighbor_id)`` to the pair DepthMap.
    """
    index = np.asarray(index, dtype=np.int64)
    parts = []
    for nb_id, hit, depth, energy in _pair_lookup(cloud, index, pair_maps):
        ok = np.isfinite(depth) & np.isfinite(energy)
        hit, depth, energy = hit[ok], depth[ok], energy[ok]
        if hit.size == 0:
            continue
        pts = index[hit]
        base = views[int(cloud.source_image[pts[0]])]
        px = cloud.source_pixel[pts][:, ::-1].astype(np.float64)
        corr_world = base.back_project(px, depth)
        view_j = views[int(nb_id)]
        corr, zc = view_j.project_many(corr_world)
        uv, z = view_j.project_many(cloud.positions[pts])
        ok = (z > 1e-12) & (zc > 1e-12)
        r = np.hypot(*(uv - corr).T)
        parts.append(ReprojectionSamples(
            pts[ok], cloud.source_image[pts[ok]], cloud.source_pixel[pts[ok]],
            np.full(int(ok.sum()), nb_id, np.int64), energy[ok], r[ok]))
    s = ReprojectionSamples.concatenate(parts)
    order = np.lexsort((s.neighbor, s.point))
    return ReprojectionSamples(*(getattr(s, f)[order] for f in
                                 ("point", "base_image", "pixel", "neighbor", "energy", "error_px")))


# --------------------------------------------------------------------------- Gamma fitting


@dataclass(frozen=True)
class GammaModel:
    """Gamma(shape k, scale theta) fitted to errors in energy bin ``[e_lo, e_hi)``."""

    shape: float
    scale: float
    e_lo: float = 0.0
    e_hi: float = float("inf")
    sample_count: int = 0
    clamped: int = 0
    merged: bool = False

    @property
    def mean(self):
        return self.shape * self.scale

    @property
    def std(self):
        return float(np.sqrt(self.shape) * self.scale)


def fit_gamma(samples, e_lo=0.0, e_hi=float("inf"), max_iter=100, tol=1e-10):
    """Maximum-likelihood two-parameter Gamma fit.

    Solves ``ln k - digamma(k) = ln(mean) - mean(ln x)`` by Newton's method
    from Minka's closed-form start; ``theta = mean / k`` so the fitted mean
    equals the sample mean. Zeros are clamped to 1e-6 before taking logs.

    Raises:
        NoSamples: Empty input.
        DegenerateSamples: Sample variance below 1e-18.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise NoSamples("no samples to fit")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValueError("samples must be finite and non-negative")
    clamped = int((x < ZERO_CLAMP).sum())
    x = np.maximum(x, ZERO_CLAMP)
    if x.size < 2 or x.var() < 1e-18:
        raise DegenerateSamples("samples are (numerically) constant; Gamma MLE does not exist")
    mean = x.mean()
    s = np.log(mean) - np.log(x).mean()
    if s <= 0:
        raise DegenerateSamples("log-mean gap is not positive")
    k = (3.0 - s + np.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    for _ in range(max_iter):
        f = np.log(k) - digamma(k) - s
        fp = 1.0 / k - polygamma(1, k)
        step = f / fp
        k_new = k - step
        if k_new <= 0:
            k_new = 0.5 * k
        done = abs(k_new - k) / k < tol
        k = k_new
        if done:
            break
    else:
        log.warning("Gamma Newton iteration did not reach tolerance (k=%.6g)", k)
    k = float(k)
    return GammaModel(k, float(mean / k), float(e_lo), float(e_hi), int(x.size), clamped)


# --------------------------------------------------------------------------- table


@dataclass(frozen=True)
class UqTable:
    bin_size: float
    min_samples: int
    models: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.models)

    @property
    def lower_edges(self):
        return np.array([m.e_lo for m in self.models])


def build_uq_table(energy, error_px, bin_size=1000.0, min_samples=200):
    """Bin samples by energy and fit one Gamma model per bin.

    Base bins are ``[i*bin_size, (i+1)*bin_size)``. Walking upward from the
    lowest populated bin, a bin holding fewer than ``min_samples`` samples is
    merged into the bin to its right; a short remainder at the top is merged
    into the last emitted bin. If all samples together are fewer than
    ``min_samples`` they form one (merged) bin.

    Raises:
        NoSamples: No finite samples.
    """
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    e = np.asarray(energy, dtype=np.float64)
    r = np.asarray(error_px, dtype=np.float64)
    ok = np.isfinite(e) & np.isfinite(r)
    e, r = e[ok], r[ok]
    if e.size == 0:
        raise NoSamples("no reprojection samples")
    base = np.floor(np.maximum(e, 0.0) / bin_size).astype(np.int64)
    first, last = int(base.min()), int(base.max())
    counts = np.bincount(base - first, minlength=last - first + 1)
    groups = []  # [start_bin, end_bin_exclusive]
    start, acc = first, 0
    for b in range(first, last + 1):
        acc += counts[b - first]
        if acc >= min_samples:
            groups.append([start, b + 1])
            start, acc = b + 1, 0
    if acc > 0 or not groups:
        if groups:
            groups[-1][1] = last + 1
        else:
            groups.append([first, last + 1])
    models = []
    for g0, g1 in groups:
        sel = (base >= g0) & (base < g1)
        m = fit_gamma(r[sel], g0 * bin_size, g1 * bin_size)
        merged = (g1 - g0) > 1 or int(sel.sum()) < min_samples
        models.append(GammaModel(m.shape, m.scale, m.e_lo, m.e_hi, m.sample_count, m.clamped, merged))
    return UqTable(float(bin_size), int(min_samples), tuple(models))


def _lookup(energy, table):
    if len(table) == 0:
        raise EmptyTable("UQ table has no bins")
    e = np.asarray(energy, dtype=np.float64)
    idx = np.searchsorted(table.lower_edges, e, side="right") - 1
    extrapolated = (idx < 0) | (e >= table.models[-1].e_hi)
    return np.clip(idx, 0, len(table) - 1), extrapolated


def infer_error(energy, table):
    """Model of the bin containing ``energy`` and whether it lies outside the table.

    Bins are half-open, so a shared edge belongs to the upper bin. Energies
    below the first bin get the first model, energies at or above the last
    bin's upper edge get the last model; both are flagged as extrapolated.

    Returns:
        ``(GammaModel, extrapolated)``.
    """
    idx, ext = _lookup(float(energy), table)
    return table.models[int(idx)], bool(ext)


def infer_arrays(energy, table):
    """Vectorised lookup: ``(mean_px, std_px, extrapolated)`` per energy (NaN stays NaN)."""
    e = np.asarray(energy, dtype=np.float64)
    idx, ext = _lookup(np.where(np.isfinite(e), e, 0.0), table)
    means = np.array([m.mean for m in table.models])[idx]
    stds = np.array([m.std for m in table.models])[idx]
    bad = ~np.isfinite(e)
    means[bad] = np.nan
    stds[bad] = np.nan
    return means, stds, ext & ~bad


def annotate_cloud(cloud, table, pair_maps=None):
    """Attach ``predicted_error_mean_px`` / ``predicted_error_std_px`` columns.

    Each contributing pair's energy at the point's base pixel is looked up in
    the table, and the per-pair predictions are combined by their median. With
    no ``pair_maps`` the point's fused energy is used as its single pair.
    Points without any valid pair energy get NaN and ``uq_flag`` 1.

    Returns a new cloud; the input is left unchanged.
    """
    n = len(cloud)
    out = cloud.subset(slice(None))
    if pair_maps is None:
        means, stds, _ = infer_arrays(cloud.energy, table)
    else:
        M = max(1, cloud.pair_ids.shape[1]) if cloud.pair_ids is not None else 1
        pm = np.full((n, M), np.nan)
        ps = np.full((n, M), np.nan)
        fill = np.zeros(n, np.int64)
        index = np.arange(n)
        for _, hit, _depth, energy in _pair_lookup(cloud, index, pair_maps):
            mu, sd, _ = infer_arrays(energy, table)
            slot = fill[hit]
            pm[hit, slot] = mu
            ps[hit, slot] = sd
            fill[hit] += 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN rows
            means = np.nanmedian(pm, axis=1)
            stds = np.nanmedian(ps, axis=1)
    out.extra["predicted_error_mean_px"] = means
    out.extra["predicted_error_std_px"] = stds
    out.extra["uq_flag"] = (~np.isfinite(means)).astype(np.float64)
    return out
