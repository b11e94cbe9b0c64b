"""Reference-based accuracy evaluation.

ICP registration, nearest-neighbour errors, metric-binned MAE statistics,
error-split histograms, pair-composition tables and the energy/error fit.
All standard deviations are population standard deviations.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from . import geom
from .errors import DegenerateGeometry, EmptyCloud, EmptyReference, InsufficientBins, NonMonotonicEdges

log = logging.getLogger(__name__)

RAY_EDGES = tuple(range(3, 12))
ANGLE_EDGES = tuple(float(a) for a in range(0, 55, 5))
HIST_ANGLE_EDGES = tuple(float(a) for a in range(0, 65, 5))
COMPOSITIONS = ("NN", "NO", "OO")


def _positions(cloud):
    return np.asarray(getattr(cloud, "positions", cloud), dtype=np.float64).reshape(-1, 3)


# --------------------------------------------------------------------------- rigid transforms


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_angle_deg(self):
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_dict(self):
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}


def estimate_rigid(source, target):
    """Least-squares rigid motion mapping ``source`` onto ``target`` (paired rows).

    Closed form via the SVD of the cross-covariance, with the determinant
    correction that rules out reflections.

    Raises:
        DegenerateGeometry: fewer than 3 pairs, or colinear source points.
    """
    s = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if s.shape != d.shape:
        raise ValueError("source and target must be paired")
    if len(s) < 3:
        raise DegenerateGeometry(f"need at least 3 point pairs, got {len(s)}")
    cs, cd = s.mean(axis=0), d.mean(axis=0)
    s0, d0 = s - cs, d - cd
    sv = np.linalg.svd(s0, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("source points are colinear; rotation is undetermined")
    U, _, Vt = np.linalg.svd(s0.T @ d0)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def _state(T):
    """7-vector (unit quaternion, translation) of a transform, sign-fixed."""
    q = Rotation.from_matrix(T.rotation).as_quat()
    return np.concatenate([q if q[3] >= 0 else -q, T.translation])


def _from_state(x):
    q = x[:4] / np.linalg.norm(x[:4])
    return RigidTransform(Rotation.from_quat(q).as_matrix(), x[4:])


def _extrapolation_length(d, step, prev_step, max_factor=25.0):
    """Besl-McKay step length along the latest state increment.

    ``d`` holds the last three RMS values (oldest first). A line through the
    last two and a parabola through all three, both in arc length, are
    extrapolated; the parabola's vertex is preferred when it lies before the
    line's zero crossing.
    """
    v = np.array([-(step + prev_step), -step, 0.0])
    v_max = max_factor * step
    slope = (d[2] - d[1]) / step
    if slope >= 0:
        return 0.0
    v1 = -d[2] / slope
    a, b, _ = np.polyfit(v, d, 2)
    v2 = -b / (2 * a) if a > 0 else v_max
    if 0 < v2 < v1 and v2 < v_max:
        return v2
    return min(v1, v_max)


def icp_register(source, target, max_iters=50, conv_tol=1e-6, trim=0.1, init=None, workers=1,
                 accelerate=True, accel_angle_deg=10.0):
    """Point-to-point ICP of ``source`` onto ``target``.

    Each iteration pairs every source point with its nearest target point,
    drops the worst ``trim`` fraction of pairs and re-estimates the rigid
    motion from the remaining pairs. With ``accelerate`` the registration
    state is extrapolated whenever the last two updates point within
    ``accel_angle_deg`` of each other (Besl-McKay acceleration). An
    extrapolated state is kept only when it lowers the trimmed RMS.

    Args:
        source: PointCloud or (N, 3) array.
        target: PointCloud or (M, 3) array.
        max_iters: Iteration cap.
        conv_tol: Stop once the trimmed RMS changes by less than this (metres).
        trim: Fraction of worst pairs discarded per iteration.
        init: ``None`` (identity), ``"centroid"`` (translate centroids
            together) or a RigidTransform.
        workers: Threads for the nearest-neighbour queries.
        accelerate: Enable state extrapolation.
        accel_angle_deg: Alignment threshold between successive updates.

    Returns:
        ``(RigidTransform, rms)``, with rms over the retained pairs.
    """
    src, dst = _positions(source), _positions(target)
    if len(src) == 0:
        raise EmptyCloud("source cloud is empty")
    if len(dst) == 0:
        raise EmptyReference("target cloud is empty")
    if init is None:
        T = RigidTransform.identity()
    elif isinstance(init, str) and init == "centroid":
        T = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
    elif isinstance(init, RigidTransform):
        T = init
    else:
        raise ValueError(f"unknown ICP init {init!r}")
    tree = cKDTree(dst)
    n_keep = max(3, int(np.ceil(len(src) * (1.0 - trim))))
    n_keep = min(n_keep, len(src))
    cos_limit = np.cos(np.radians(accel_angle_deg))

    def pairs(T):
        dist, idx = tree.query(T.apply(src), k=1, workers=workers)
        keep = np.argsort(dist, kind="stable")[:n_keep]
        return keep, idx[keep], float(np.sqrt(np.mean(dist[keep] ** 2)))

    keep, idx, rms = pairs(T)
    states, errors, deltas = [_state(T)], [rms], []
    for it in range(max_iters):
        T = estimate_rigid(src[keep], dst[idx])
        keep, idx, new_rms = pairs(T)
        x = _state(T)
        deltas.append(x - states[-1])
        states.append(x)
        errors.append(new_rms)
        if accelerate and len(deltas) >= 2 and len(errors) >= 3:
            d1, d0 = deltas[-1], deltas[-2]
            n1, n0 = np.linalg.norm(d1), np.linalg.norm(d0)
            if n1 > 0 and n0 > 0 and d1 @ d0 >= cos_limit * n1 * n0:
                length = _extrapolation_length(np.array(errors[-3:]), n1, n0)
                if length > 0:
                    T_x = _from_state(x + d1 * (length / n1))
                    keep_x, idx_x, rms_x = pairs(T_x)
                    if rms_x < new_rms:
                        T, keep, idx, new_rms = T_x, keep_x, idx_x, rms_x
                        states[-1] = _state(T)
                        errors[-1] = new_rms
                        deltas.clear()  # restart direction tracking after a jump
        done = abs(rms - new_rms) < conv_tol
        rms = new_rms
        if done:
            log.debug("ICP converged after %d iterations, rms %.3g", it + 1, rms)
            break
    return T, rms


# --------------------------------------------------------------------------- point errors


def per_point_error(cloud, reference, workers=1):
    """Euclidean distance from every cloud point to its nearest reference point."""
    ref = _positions(reference)
    if len(ref) == 0:
        raise EmptyReference("reference cloud is empty")
    pts = _positions(cloud)
    if len(pts) == 0:
        return np.zeros(0)
    dist, _ = cKDTree(ref).query(pts, k=1, workers=workers)
    return dist


def error_summary(errors):
    """``(MAE, population std)``; ``(None, None)`` for no errors."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return None, None
    return float(e.mean()), float(e.std())


# --------------------------------------------------------------------------- binning


@dataclass(frozen=True, eq=False)
class BinnedErrorStats:
    """Error statistics per metric bin. ``hi`` is ``inf`` for an open last bin."""

    metric_name: str
    lo: np.ndarray
    hi: np.ndarray
    mae: np.ndarray      # NaN for empty bins
    std: np.ndarray      # NaN for empty bins
    count: np.ndarray
    proportion: np.ndarray
    outside: int = 0     # points whose metric falls in no bin

    def __len__(self):
        return len(self.lo)

    @property
    def populated(self):
        return self.count > 0

    def rows(self):
        for i in range(len(self)):
            mae = None if self.count[i] == 0 else float(self.mae[i])
            std = None if self.count[i] == 0 else float(self.std[i])
            yield (float(self.lo[i]), float(self.hi[i]), mae, std, int(self.count[i]), float(self.proportion[i]))


def bin_index(values, edges, open_last=True):
    """Bin of each value under half-open ``[lo, hi)`` bins; -1 outside every bin."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 1 or np.any(np.diff(edges) <= 0):
        raise NonMonotonicEdges("bin edges must be strictly increasing")
    nbins = len(edges) if open_last else len(edges) - 1
    if nbins < 1:
        raise NonMonotonicEdges("need at least two edges for closed bins")
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx[(idx >= nbins) | ~np.isfinite(v)] = -1
    return idx


def bin_by_metric(metric, errors, edges, metric_name="metric", open_last=True):
    """Split points by ``metric`` and report MAE/std/count/proportion per bin.

    Args:
        metric: Per-point metric values.
        errors: Per-point errors in metres.
        edges: Strictly increasing bin edges.
        metric_name: Label carried into the result.
        open_last: Add a final ``[edges[-1], inf)`` bin.

    Raises:
        NonMonotonicEdges: Edges not strictly increasing.
    """
    e = np.asarray(errors, dtype=np.float64)
    idx = bin_index(metric, edges, open_last)
    edges = np.asarray(edges, dtype=np.float64)
    nbins = len(edges) if open_last else len(edges) - 1
    lo = edges[:nbins].copy()
    hi = np.append(edges[1:], np.inf)[:nbins]
    inside = idx >= 0
    count = np.bincount(idx[inside], minlength=nbins)
    sums = np.bincount(idx[inside], weights=e[inside], minlength=nbins)
    mae = np.full(nbins, np.nan)
    std = np.full(nbins, np.nan)
    nz = count > 0
    mae[nz] = sums[nz] / count[nz]
    for b in np.nonzero(nz)[0]:
        std[b] = e[idx == b].std()
    total = count.sum()
    proportion = count / total if total else np.zeros(nbins)
    return BinnedErrorStats(metric_name, lo, hi, mae, std, count, proportion, int((~inside).sum()))


# --------------------------------------------------------------------------- error split


@dataclass(frozen=True, eq=False)
class ErrorSplit:
    threshold: float
    low: np.ndarray          # indices with error < threshold
    high: np.ndarray         # indices with error >= threshold
    ray_edges: np.ndarray
    ray_hist: dict           # {"low": counts, "high": counts}
    angle_edges: np.ndarray
    angle_hist: dict


def _hist(values, edges):
    idx = bin_index(values, edges, open_last=True)
    return np.bincount(idx[idx >= 0], minlength=len(edges))


def split_by_error(errors, num_rays, median_angle, threshold=0.5,
                   ray_edges=RAY_EDGES, angle_edges=HIST_ANGLE_EDGES):
    """Split points at ``threshold`` metres and histogram their metrics.

    ``error >= threshold`` goes to the high group. Histogram bins are
    half-open with an open-ended last bin.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    e = np.asarray(errors, dtype=np.float64)
    rays = np.asarray(num_rays)
    ang = np.asarray(median_angle, dtype=np.float64)
    high_mask = e >= threshold
    low, high = np.nonzero(~high_mask)[0], np.nonzero(high_mask)[0]
    return ErrorSplit(
        float(threshold), low, high,
        np.asarray(ray_edges, dtype=np.float64),
        {"low": _hist(rays[low], ray_edges), "high": _hist(rays[high], ray_edges)},
        np.asarray(angle_edges, dtype=np.float64),
        {"low": _hist(ang[low], angle_edges), "high": _hist(ang[high], angle_edges)},
    )


# --------------------------------------------------------------------------- pair composition


def pair_label(view_a, view_b, tilt_threshold=20.0):
    """NN / NO / OO label of a stereo pair."""
    return geom.pair_composition(geom.classify_view(view_a, tilt_threshold),
                                 geom.classify_view(view_b, tilt_threshold))


def pair_points(base, depth_map):
    """3-D points of a pair depth map's valid pixels."""
    rows, cols = np.nonzero(depth_map.valid)
    pix = np.stack([cols, rows], axis=1).astype(np.float64)
    return base.back_project(pix, depth_map.depth[rows, cols])


@dataclass(frozen=True)
class CompositionRow:
    composition: str
    count: int
    mean_vs_mvs: float
    std_vs_mvs: float
    mean_vs_reference: float | None
    std_vs_reference: float | None


@dataclass(frozen=True)
class PairCompositionStats:
    rows: dict  # composition -> CompositionRow, or None when the class is empty

    def __getitem__(self, key):
        return self.rows[key]


def pair_composition_stats(stereo_points, mvs_cloud, reference=None, transform=None, workers=1):
    """Distance statistics of per-pair stereo points, grouped by composition.

    Args:
        stereo_points: Mapping composition label to a list of (N, 3) arrays.
        mvs_cloud: Fused MVS cloud (or positions).
        reference: Optional reference cloud.
        transform: Registration applied to stereo points and the MVS cloud
            before comparison with the reference.
    """
    mvs = _positions(mvs_cloud)
    if len(mvs) == 0:
        raise EmptyCloud("MVS cloud is empty")
    mvs_tree = cKDTree(mvs)
    ref_tree = None
    if reference is not None:
        ref = _positions(reference)
        if len(ref) == 0:
            raise EmptyReference("reference cloud is empty")
        ref_tree = cKDTree(ref)
    rows = {}
    for label in COMPOSITIONS:
        parts = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in stereo_points.get(label, ())]
        pts = np.concatenate(parts) if parts else np.zeros((0, 3))
        if len(pts) == 0:
            rows[label] = None
            continue
        d_mvs, _ = mvs_tree.query(pts, k=1, workers=workers)
        mean_ref = std_ref = None
        if ref_tree is not None:
            reg = pts if transform is None else transform.apply(pts)
            d_ref, _ = ref_tree.query(reg, k=1, workers=workers)
            mean_ref, std_ref = float(d_ref.mean()), float(d_ref.std())
        rows[label] = CompositionRow(label, len(pts), float(d_mvs.mean()), float(d_mvs.std()), mean_ref, std_ref)
    return PairCompositionStats(rows)


# --------------------------------------------------------------------------- angle histograms


def intersection_angle_histogram(angles_deg, bin_width=5.0, max_deg=60.0):
    """Counts in ``bin_width`` degree bins over ``[0, max_deg)`` plus an overflow bin.

    Returns ``(edges, counts)``; ``counts[-1]`` is the overflow bin
    ``[max_deg, inf)``.
    """
    edges = np.arange(0.0, max_deg + 0.5 * bin_width, bin_width)
    a = np.asarray(angles_deg, dtype=np.float64)
    return edges, _hist(a[np.isfinite(a)], edges)


def pair_angle(base, neighbor, depth):
    """Intersection angle at the point ``depth`` metres along the base principal ray."""
    pp = np.array([[base.principal_x, base.principal_y]])
    X = base.back_project(pp, np.array([depth]))[0]
    return geom.intersection_angle(X, base.center, neighbor.center)


# --------------------------------------------------------------------------- energy fit


def ols_fit(x, y):
    """Ordinary least squares ``y = slope * x + intercept``.

    Returns ``(slope, intercept, r_squared)``. R² is ``None`` when ``y`` has
    zero total variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    syy = np.sum((y - ym) ** 2)
    if sxx == 0:
        raise InsufficientBins("x has no spread")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    if syy == 0:
        return slope, intercept, None
    resid = y - (slope * x + intercept)
    return slope, intercept, float(1.0 - np.sum(resid ** 2) / syy)


def correlation_r2(x, y):
    """R² of the OLS line of ``y`` on ``x``; ``None`` for constant ``y``.

    Raises:
        InsufficientBins: Fewer than 3 finite (x, y) pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 3:
        raise InsufficientBins(f"need at least 3 populated bins, got {int(ok.sum())}")
    return ols_fit(x[ok], y[ok])[2]


def energy_bin_means(energy, edges, open_last=True):
    """Mean energy of the points in each bin (NaN for empty bins)."""
    e = np.asarray(energy, dtype=np.float64)
    idx = bin_index(e, edges, open_last)
    nbins = len(edges) if open_last else len(edges) - 1
    inside = idx >= 0
    count = np.bincount(idx[inside], minlength=nbins)
    sums = np.bincount(idx[inside], weights=e[inside], minlength=nbins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, sums / np.maximum(count, 1), np.nan)


def fixed_width_edges(values, width, start=0.0):
    """Edges ``start + i*width`` covering the finite ``values``."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    top = v.max() if v.size else start
    n = int(np.floor((top - start) / width)) + 1
    return start + width * np.arange(max(n, 1), dtype=np.float64)
