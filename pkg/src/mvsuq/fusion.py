"""Neighbour selection, per-pair depth maps, k-of-n consistency and fusion."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import geom, kernels
from .errors import FrameMismatch, InsufficientViews, KBelowTwo
from .stereo import SgmParams, hierarchical_match

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NeighborSet:
    base_id: int
    neighbor_ids: tuple
    scores: tuple


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth (camera-frame z, metres) on the grid of ``image_id``.

    ``neighbor_id`` is the partner image for a pair map, ``None`` for a fused map.
    """

    image_id: int
    neighbor_id: int | None
    depth: np.ndarray       # (H, W) float64, NaN = invalid
    dim_energy: np.ndarray  # (H, W) float64, NaN = invalid

    @property
    def valid(self):
        return np.isfinite(self.depth)


@dataclass(frozen=True)
class PairRejection:
    base_id: int
    neighbor_id: int
    reason: str


@dataclass(frozen=True)
class FusedPoint:
    position: np.ndarray
    source_image: int
    source_pixel: tuple
    num_rays: int
    median_angle: float
    energy: float
    contributing_pair_ids: tuple


_OPTIONAL = ("source_image", "source_pixel", "num_rays", "median_angle", "energy", "pair_ids")


@dataclass(eq=False)
class PointCloud:
    """Columnar point cloud. Only ``positions`` is mandatory.

    ``source_pixel`` holds (row, col); ``pair_ids`` is an (N, m) int32 array of
    contributing neighbour ids padded with -1. ``extra`` carries additional
    per-point float columns such as ``error_m``.
    """

    positions: np.ndarray
    source_image: np.ndarray | None = None
    source_pixel: np.ndarray | None = None
    num_rays: np.ndarray | None = None
    median_angle: np.ndarray | None = None
    energy: np.ndarray | None = None
    pair_ids: np.ndarray | None = None
    frame: str = "world"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.positions).all():
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def bounding_box(self):
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def subset(self, index):
        kw = {name: (None if getattr(self, name) is None else getattr(self, name)[index]) for name in _OPTIONAL}
        extra = {k: v[index] for k, v in self.extra.items()}
        return PointCloud(self.positions[index], frame=self.frame, extra=extra, **kw)

    def transformed(self, transform):
        out = self.subset(slice(None))
        out.positions = transform.apply(self.positions)
        return out

    def point(self, i):
        ids = () if self.pair_ids is None else tuple(int(v) for v in self.pair_ids[i] if v >= 0)
        return FusedPoint(
            self.positions[i].copy(),
            int(self.source_image[i]),
            tuple(int(v) for v in self.source_pixel[i]),
            int(self.num_rays[i]),
            float(self.median_angle[i]),
            float(self.energy[i]),
            ids,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)


# --------------------------------------------------------------------------- neighbours


def angle_weight(theta_deg):
    """1 on [5, 45] degrees, linear ramps to 0 at 0 and 60 degrees, 0 beyond."""
    t = np.asarray(theta_deg, dtype=np.float64)
    w = np.where(t < 5.0, t / 5.0, np.where(t <= 45.0, 1.0, (60.0 - t) / 15.0))
    w = np.clip(w, 0.0, 1.0)
    return float(w) if w.ndim == 0 else w


def sample_pixels(view, n_rays=256, seed=0):
    """Stratified-jittered pixel samples over the image (deterministic for a seed)."""
    side = int(np.ceil(np.sqrt(n_rays)))
    rng = np.random.default_rng(seed)
    gy, gx = np.divmod(np.arange(side * side), side)
    jit = rng.random((side * side, 2))
    u = (gx + jit[:, 0]) / side * view.width - 0.5
    v = (gy + jit[:, 1]) / side * view.height - 0.5
    return np.stack([u, v], axis=1)[:n_rays]


def pair_score(base, candidate, n_rays=256, seed=0):
    """(score, overlap, theta): frustum overlap at the base's prior depth times the angle weight.

    ``theta`` is the intersection angle at the point on the base principal ray
    at the mid prior depth.
    """
    z_near, z_far = base.depth_prior
    z = 0.5 * (z_near + z_far)
    px = sample_pixels(base, n_rays, seed)
    pts = base.back_project(px, np.full(len(px), z))
    uv, depth = candidate.project_many(pts)
    inside = (
        (depth > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] < candidate.width - 0.5)
        & (uv[:, 1] >= -0.5) & (uv[:, 1] < candidate.height - 0.5)
    )
    overlap = float(inside.mean())
    anchor = base.back_project(np.array([base.principal_x, base.principal_y]), z)
    if np.linalg.norm(candidate.center - base.center) < 1e-12:
        return 0.0, overlap, 0.0
    theta = geom.intersection_angle(anchor, base.center, candidate.center)
    return overlap * angle_weight(theta), overlap, theta


def select_neighbors(views, base_id, n=10, k=2, n_rays=256, seed=0):
    """Top-``n`` neighbours of ``base_id`` ranked by :func:`pair_score`."""
    by_id = {v.image_id: v for v in views}
    if len(by_id) < 2:
        raise InsufficientViews(f"need at least 2 views, got {len(by_id)}")
    base = by_id[base_id]
    scored = []
    for v in views:
        if v.image_id == base_id:
            continue
        s, _, _ = pair_score(base, v, n_rays, seed)
        if s > 0:
            scored.append((-s, v.image_id))
    scored.sort()
    if len(scored) < k:
        raise InsufficientViews(f"image {base_id}: only {len(scored)} candidate neighbours score > 0 (k = {k})")
    chosen = scored[:n]
    return NeighborSet(base_id, tuple(i for _, i in chosen), tuple(-s for s, _ in chosen))


# --------------------------------------------------------------------------- pair depth maps


@dataclass(frozen=True)
class StereoSettings:
    params: SgmParams = field(default_factory=SgmParams)
    window: tuple = (9, 7)
    search_band: int = 4
    d_range_margin: int = 2


def usable_levels(width, requested):
    levels = max(1, int(requested))
    while levels > 1 and width >> (levels - 1) < 32:
        levels -= 1
    return levels


def pair_depth_map(base, neighbor, settings=StereoSettings()):
    """Match ``base`` against ``neighbor`` and resample the result onto the base grid.

    Each base pixel is mapped into the rectified frame (a pure rotation), the
    rectified disparity at the nearest rectified pixel is read, and depth is
    placed along the base pixel's own ray.
    """
    pair = geom.rectify_pair(base, neighbor, settings.d_range_margin)
    left, lmask = pair.resample(base)
    right, rmask = pair.resample(neighbor)
    levels = usable_levels(pair.width, settings.params.pyramid_levels)
    params = settings.params
    if levels != params.pyramid_levels:
        log.debug("pair %d-%d: pyramid reduced to %d levels", base.image_id, neighbor.image_id, levels)
        params = SgmParams(params.lambda_p1, params.lambda_p2, params.path_count, levels,
                           params.adaptive_p2, params.subpixel)
    dm = hierarchical_match(left, right, pair.disparity_range, params, lmask, rmask,
                            settings.window, settings.search_band)
    H, W = base.height, base.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    rect, zr = pair.to_rectified(base, np.stack([uu, vv], axis=-1))
    ur = np.rint(rect[..., 0])
    vr = np.rint(rect[..., 1])
    inside = (zr > 0) & (ur >= 0) & (ur < pair.width) & (vr >= 0) & (vr < pair.height)
    ui = np.where(inside, ur, 0).astype(np.int64)
    vi = np.where(inside, vr, 0).astype(np.int64)
    d = np.where(inside, dm.disparity[vi, ui], np.nan).astype(np.float64)
    e = np.where(inside, dm.dim_energy[vi, ui], np.nan).astype(np.float64)
    ok = np.isfinite(d) & (d > 0)
    depth = np.full((H, W), np.nan)
    depth[ok] = pair.rectified_focal * pair.baseline / d[ok] / zr[ok]
    e[~ok] = np.nan
    return DepthMap(base.image_id, neighbor.image_id, depth, e)


def pair_depth_maps(base, neighbors, settings=StereoSettings()):
    """Depth maps of ``base`` against each neighbour; rejected pairs are logged and skipped.

    Returns ``(maps, rejections)``.
    """
    maps, rejections = [], []
    for nb in neighbors:
        try:
            maps.append(pair_depth_map(base, nb, settings))
        except (geom.ExcessiveConvergence, geom.CoincidentCenters) as exc:
            log.warning("pair %d-%d rejected: %s", base.image_id, nb.image_id, exc)
            rejections.append(PairRejection(base.image_id, nb.image_id, str(exc)))
    return maps, rejections


# --------------------------------------------------------------------------- consistency & fusion


def _median(sorted_values):
    n = len(sorted_values)
    if n % 2:
        return sorted_values[n // 2]
    return 0.5 * (sorted_values[n // 2 - 1] + sorted_values[n // 2])


def consistent_subset(depths, eps_rel=0.01):
    """Largest subset whose members all lie within ``eps_rel`` of the subset median.

    Invalid (NaN/None) entries are dropped first. Among equally large subsets
    the one whose sorted positions are lexicographically smallest wins.
    Returns the subset as a sorted list.
    """
    vals = sorted(float(z) for z in depths if z is not None and np.isfinite(z))
    if not vals:
        return []
    V = np.array([vals])
    sizes, masks = kernels.consistent_subsets(V, np.array([len(vals)], np.int64), float(eps_rel))
    m = int(masks[0])
    return [vals[i] for i in range(len(vals)) if (m >> i) & 1]


def _masked_median(values, sel):
    v = np.where(sel, values, np.inf)
    v.sort(axis=1)
    n = sel.sum(axis=1)
    hi = np.clip(n // 2, 0, values.shape[1] - 1)
    lo = np.clip((n - 1) // 2, 0, values.shape[1] - 1)
    r = np.arange(len(v))
    a, b = v[r, lo], v[r, hi]
    with np.errstate(invalid="ignore"):
        return np.where(n % 2 == 1, b, 0.5 * (a + b))


def fuse_image(base, depth_maps, k=2, eps_rel=0.01, neighbor_centers=None):
    """Fuse a base image's pair depth maps.

    A pixel survives when at least ``k`` maps agree (see
    :func:`consistent_subset`); its depth is the subset median and the point is
    placed on the base pixel ray. ``neighbor_centers`` maps neighbour id to
    camera centre and is required for the intersection-angle metric.

    Returns ``(fused DepthMap, PointCloud)``.
    """
    if k < 2:
        raise KBelowTwo(f"k must be >= 2, got {k}")
    H, W = base.height, base.width
    M = len(depth_maps)
    empty_map = DepthMap(base.image_id, None, np.full((H, W), np.nan), np.full((H, W), np.nan))
    if M < k:
        return empty_map, _empty_cloud(M)
    Z = np.stack([m.depth.reshape(-1) for m in depth_maps], axis=1)
    E = np.stack([m.dim_energy.reshape(-1) for m in depth_maps], axis=1)
    ok = np.isfinite(Z)
    counts = ok.sum(axis=1)
    cand = np.nonzero(counts >= k)[0]
    order = np.argsort(np.where(ok[cand], Z[cand], np.inf), axis=1, kind="stable")
    V = np.take_along_axis(Z[cand], order, axis=1)
    sizes, masks = kernels.consistent_subsets(np.ascontiguousarray(V), counts[cand].astype(np.int64),
                                              float(eps_rel))
    keep = sizes >= k
    cand, order, V, masks, sizes = cand[keep], order[keep], V[keep], masks[keep], sizes[keep]
    bits = ((masks[:, None] >> np.arange(M)[None, :]) & 1).astype(bool)
    fused = _masked_median(V, bits)

    # map-index selection (unsorted) for energy / angle / ids
    sel = np.zeros((len(cand), M), bool)
    np.put_along_axis(sel, order, bits, axis=1)
    energy = _masked_median(E[cand], sel)

    rows, cols = np.divmod(cand, W)
    pix = np.stack([cols, rows], axis=1).astype(np.float64)
    positions = base.back_project(pix, fused)
    ids = np.array([m.neighbor_id for m in depth_maps])
    angles = np.full((len(cand), M), np.nan)
    if neighbor_centers is not None:
        for j, m in enumerate(depth_maps):
            angles[:, j] = geom.intersection_angles(positions, base.center, neighbor_centers[m.neighbor_id])
    median_angle = _masked_median(angles, sel)

    pair_ids = _compact(np.where(sel, ids[None, :], -1).astype(np.int32))

    depth = np.full(H * W, np.nan)
    depth[cand] = fused
    emap = np.full(H * W, np.nan)
    emap[cand] = energy
    fused_map = DepthMap(base.image_id, None, depth.reshape(H, W), emap.reshape(H, W))
    cloud = PointCloud(
        positions,
        source_image=np.full(len(cand), base.image_id, np.int64),
        source_pixel=np.stack([rows, cols], axis=1).astype(np.int64),
        num_rays=(sizes + 1).astype(np.int64),
        median_angle=median_angle,
        energy=energy,
        pair_ids=pair_ids,
    )
    return fused_map, cloud


def _compact(ids):
    """Move valid ids to the front of each row, preserving their order."""
    order = np.argsort(ids < 0, axis=1, kind="stable")
    return np.take_along_axis(ids, order, axis=1)


def _empty_cloud(m=0):
    return PointCloud(
        np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros((0, 2), np.int64), np.zeros(0, np.int64),
        np.zeros(0), np.zeros(0), np.zeros((0, max(m, 1)), np.int32),
    )


def merge_clouds(clouds):
    """Concatenate per-image clouds, ordered by (source image, row, col)."""
    clouds = list(clouds)
    if not clouds:
        return _empty_cloud()
    frames = {c.frame for c in clouds}
    if len(frames) > 1:
        raise FrameMismatch(f"clouds are in different frames: {sorted(frames)}")
    width = max((c.pair_ids.shape[1] for c in clouds if c.pair_ids is not None), default=1)

    def col(name):
        parts = [getattr(c, name) for c in clouds]
        if any(p is None for p in parts):
            return None
        if name == "pair_ids":
            parts = [np.pad(p, ((0, 0), (0, width - p.shape[1])), constant_values=-1) for p in parts]
        return np.concatenate(parts)

    merged = PointCloud(
        np.concatenate([c.positions for c in clouds]),
        **{name: col(name) for name in _OPTIONAL},
        frame=clouds[0].frame,
    )
    keys = set.intersection(*(set(c.extra) for c in clouds))
    merged.extra = {k: np.concatenate([c.extra[k] for c in clouds]) for k in sorted(keys)}
    if merged.source_image is not None and merged.source_pixel is not None:
        order = np.lexsort((merged.source_pixel[:, 1], merged.source_pixel[:, 0], merged.source_image))
        merged = merged.subset(order)
    return merged
