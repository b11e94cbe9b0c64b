"""Synthetic aerial scenes: height-field terrain, procedural texture, camera blocks.

Scenes stand in for real imagery with a reference point cloud. A scene is a
single-valued height field over a rectangular footprint, textured with
band-limited noise whose local contrast varies (down to fully textureless
patches), observed by a block of nadir and oblique pinhole cameras.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidSpec, NoIntersection
from .geom import CameraView
from .fusion import PointCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneSpec:
    surface: str = "hills"              # "plane" or "hills"
    base_z: float = 0.0
    footprint: tuple = (-50.0, 50.0, -40.0, 40.0)  # x0, x1, y0, y1 in metres
    n_nadir: int = 5
    n_oblique: int = 6
    altitude: float = 100.0
    nadir_spacing: float = 12.0
    oblique_tilt_deg: float = 45.0
    oblique_heads: int = 4
    width: int = 160
    height: int = 120
    oblique_width: int | None = None
    oblique_height: int | None = None
    focal: float = 200.0
    hill_count: int = 6
    hill_height: float = 8.0
    hill_sigma: float = 15.0
    texture_pitch: float = 0.25
    texture_blur: float = 1.5
    contrast: str = "mixed"             # "mixed" or "uniform"
    min_contrast: float = 0.05
    contrast_scale: float = 12.0        # metres; correlation length of the contrast field
    textureless_fraction: float = 0.0
    amplitude: float = 70.0
    base_intensity: float = 128.0
    noise_sigma: float = 2.0
    supersample: int = 2
    min_coverage: float = 0.5

    def validate(self):
        x0, x1, y0, y1 = self.footprint
        if self.surface not in ("plane", "hills"):
            raise InvalidSpec(f"unknown surface {self.surface!r}")
        if not (x1 > x0 and y1 > y0):
            raise InvalidSpec("footprint must have positive extent")
        if self.n_nadir < 0 or self.n_oblique < 0 or self.n_nadir + self.n_oblique < 1:
            raise InvalidSpec("need at least one camera")
        if self.altitude <= (self.hill_height if self.surface == "hills" else 0.0):
            raise InvalidSpec("cameras must fly above the terrain")
        if self.oblique_heads < 1:
            raise InvalidSpec("need at least one oblique head")
        if not (0.0 <= self.oblique_tilt_deg < 80.0):
            raise InvalidSpec("oblique tilt must lie in [0, 80) degrees")
        if self.contrast not in ("mixed", "uniform"):
            raise InvalidSpec(f"unknown contrast mode {self.contrast!r}")
        if not (0.0 <= self.textureless_fraction < 1.0):
            raise InvalidSpec("textureless_fraction must lie in [0, 1)")
        if self.width < 8 or self.height < 8 or self.focal <= 0 or self.supersample < 1:
            raise InvalidSpec("invalid camera raster or focal length")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "footprint" in d:
            d["footprint"] = tuple(d["footprint"])
        return cls(**d)


@dataclass(eq=False)
class SyntheticScene:
    seed: int
    spec: SceneSpec
    hills: np.ndarray          # (n, 4): cx, cy, amplitude, sigma
    texture: np.ndarray        # (ny, nx) unit-variance noise
    contrast: np.ndarray       # (ny, nx) in [0, 1]
    extent: tuple              # textured terrain x0, x1, y0, y1 (contains the footprint)
    views: list = field(default_factory=list)

    @property
    def grid_origin(self):
        x0, _, y0, _ = self.extent
        return x0, y0

    def height_at(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.full(np.broadcast(x, y).shape, float(self.spec.base_z))
        if self.spec.surface == "hills":
            for cx, cy, a, s in self.hills:
                z = z + a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * s * s))
        return z

    @property
    def height_bounds(self):
        lo = self.spec.base_z
        hi = self.spec.base_z
        if self.spec.surface == "hills" and len(self.hills):
            hi += float(np.clip(self.hills[:, 2], 0, None).sum())
            lo += float(np.clip(self.hills[:, 2], None, 0).sum())
        return lo - 1e-6, hi + 1e-6

    def inside(self, x, y, footprint=False):
        x0, x1, y0, y1 = self.spec.footprint if footprint else self.extent
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def _grid_coords(self, x, y):
        x0, y0 = self.grid_origin
        p = self.spec.texture_pitch
        return (np.asarray(y) - y0) / p, (np.asarray(x) - x0) / p

    def albedo(self, x, y):
        """Noise-free intensity at ground position(s), bilinear in the texture grid."""
        gy, gx = self._grid_coords(x, y)
        coords = [gy.ravel(), gx.ravel()]
        tex = ndimage.map_coordinates(self.texture, coords, order=1, mode="nearest")
        con = ndimage.map_coordinates(self.contrast, coords, order=1, mode="nearest")
        val = self.spec.base_intensity + self.spec.amplitude * con * tex
        return val.reshape(np.shape(x))

    def reference_cloud(self, pitch=None):
        """Dense surface samples over the footprint (the reference "LiDAR" cloud)."""
        pitch = pitch or 0.5 * self.spec.altitude / self.spec.focal
        x0, x1, y0, y1 = self.spec.footprint
        xs = np.arange(x0, x1 + 1e-9, pitch)
        ys = np.arange(y0, y1 + 1e-9, pitch)
        X, Y = np.meshgrid(xs, ys)
        Z = self.height_at(X, Y)
        return PointCloud(np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1))

    @property
    def gsd(self):
        return self.spec.altitude / self.spec.focal


def _look_at(center, target):
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _nadir_rotation():
    return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def camera_block(spec):
    """(rotation, center, width, height) tuples for the nadir grid then the oblique ring."""
    x0, x1, y0, y1 = spec.footprint
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    z = spec.base_z + spec.altitude
    cams = []
    if spec.n_nadir:
        rows = max(1, int(np.floor(np.sqrt(spec.n_nadir))))
        cols = int(np.ceil(spec.n_nadir / rows))
        for i in range(spec.n_nadir):
            r, c = divmod(i, cols)
            n_in_row = min(cols, spec.n_nadir - r * cols)
            px = cx + (c - 0.5 * (n_in_row - 1)) * spec.nadir_spacing
            py = cy + (r - 0.5 * (rows - 1)) * spec.nadir_spacing
            cams.append((_nadir_rotation(), np.array([px, py, z]), spec.width, spec.height))
    ow = spec.oblique_width or spec.width
    oh = spec.oblique_height or spec.height
    radius = spec.altitude * np.tan(np.radians(spec.oblique_tilt_deg))
    heads = spec.oblique_heads
    per_head = [len(range(h, spec.n_oblique, heads)) for h in range(heads)]
    for i in range(spec.n_oblique):
        # round-robin over heads; each head's exposures step along a flight line
        # perpendicular to its viewing direction
        slot, head = divmod(i, heads)
        az = 2.0 * np.pi * head / heads + np.pi / 4.0
        look = np.array([np.cos(az), np.sin(az), 0.0])
        side = np.array([-look[1], look[0], 0.0])
        shift = (slot - 0.5 * (per_head[head] - 1)) * spec.nadir_spacing
        c = np.array([cx, cy, z]) - radius * look + shift * side
        target = np.array([cx, cy, spec.base_z]) + shift * side
        cams.append((_look_at(c, target), c, ow, oh))
    return cams


def _ground_extent(spec, cams):
    """Bounding box of every camera's view of the base plane, joined with the footprint."""
    x0, x1, y0, y1 = spec.footprint
    xs, ys = [x0, x1], [y0, y1]
    reach = 6.0 * spec.altitude
    for R, c, w, h in cams:
        e = np.linspace(0.0, 1.0, 9)
        border = np.concatenate([
            np.stack([e * (w - 1), np.zeros_like(e)], 1), np.stack([e * (w - 1), np.full_like(e, h - 1)], 1),
            np.stack([np.zeros_like(e), e * (h - 1)], 1), np.stack([np.full_like(e, w - 1), e * (h - 1)], 1),
        ])
        rays = np.stack([(border[:, 0] - (w - 1) / 2) / spec.focal, (border[:, 1] - (h - 1) / 2) / spec.focal,
                         np.ones(len(border))], 1) @ R
        down = rays[:, 2] < -1e-9
        t = (spec.base_z - c[2]) / rays[down, 2]
        p = c + t[:, None] * rays[down]
        p = p[np.linalg.norm(p[:, :2] - c[:2], axis=1) < reach]
        xs += list(p[:, 0])
        ys += list(p[:, 1])
    m = 2.0 * spec.hill_sigma if spec.surface == "hills" else 5.0
    return min(xs) - m, max(xs) + m, min(ys) - m, max(ys) + m


def generate_scene(seed, spec=SceneSpec()):
    """Build a deterministic scene (terrain, texture, cameras) for ``seed``."""
    spec.validate()
    x0, x1, y0, y1 = spec.footprint
    rng_hills = np.random.default_rng([seed, 1])
    if spec.surface == "hills" and spec.hill_count > 0:
        hx = rng_hills.uniform(x0, x1, spec.hill_count)
        hy = rng_hills.uniform(y0, y1, spec.hill_count)
        ha = rng_hills.uniform(0.3, 1.0, spec.hill_count) * spec.hill_height
        hs = rng_hills.uniform(0.6, 1.4, spec.hill_count) * spec.hill_sigma
        hills = np.stack([hx, hy, ha, hs], axis=1)
    else:
        hills = np.zeros((0, 4))

    cams = camera_block(spec)
    extent = _ground_extent(spec, cams)
    p = spec.texture_pitch
    nx = int(np.ceil((extent[1] - extent[0]) / p)) + 1
    ny = int(np.ceil((extent[3] - extent[2]) / p)) + 1
    tex = ndimage.gaussian_filter(np.random.default_rng([seed, 0]).normal(size=(ny, nx)), spec.texture_blur)
    tex /= tex.std()

    if spec.contrast == "mixed":
        field_ = ndimage.gaussian_filter(
            np.random.default_rng([seed, 2]).normal(size=(ny, nx)), spec.contrast_scale / p
        )
        ranks = field_.ravel().argsort().argsort().reshape(ny, nx) / (field_.size - 1)
        contrast = spec.min_contrast + (1.0 - spec.min_contrast) * ranks
    else:
        contrast = np.ones((ny, nx))
    if spec.textureless_fraction > 0:
        blob = ndimage.gaussian_filter(
            np.random.default_rng([seed, 3]).normal(size=(ny, nx)), spec.contrast_scale / p
        )
        contrast = np.where(blob <= np.quantile(blob, spec.textureless_fraction), 0.0, contrast)

    scene = SyntheticScene(seed, spec, hills, tex, contrast, extent)
    zlo, zhi = scene.height_bounds
    views = []
    for i, (R, c, w, h) in enumerate(cams):
        view = CameraView(i, w, h, spec.focal, spec.focal, (w - 1) / 2.0, (h - 1) / 2.0, R, c)
        cov, prior = _coverage_and_prior(scene, view, zlo, zhi)
        if cov < spec.min_coverage:
            raise InvalidSpec(f"camera {i} sees only {cov:.0%} of the footprint")
        views.append(CameraView(i, w, h, spec.focal, spec.focal, (w - 1) / 2.0, (h - 1) / 2.0, R, c,
                                depth_prior=prior))
    scene.views = views
    return scene


def _coverage_and_prior(scene, view, zlo, zhi):
    x0, x1, y0, y1 = scene.spec.footprint
    X, Y = np.meshgrid(np.linspace(x0, x1, 41), np.linspace(y0, y1, 41))
    Z = scene.height_at(X, Y)
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    uv, depth = view.project_many(pts)
    seen = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= view.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= view.height - 1)
    cov = float(seen.mean())
    if not seen.any():
        return cov, None
    # depth prior: footprint samples seen by the camera, at both height bounds
    lows = np.stack([X.ravel(), Y.ravel(), np.full(X.size, zlo)], axis=1)[seen]
    highs = np.stack([X.ravel(), Y.ravel(), np.full(X.size, zhi)], axis=1)[seen]
    d = np.concatenate([view.to_camera(lows)[:, 2], view.to_camera(highs)[:, 2]])
    return cov, (float(d.min() * 0.9), float(d.max() * 1.1))


def cast_rays(scene, origin, dirs, n_steps=48, n_bisect=64):
    """First intersection parameter ``t`` of rays ``origin + t * dirs`` with the terrain.

    ``dirs`` is (N, 3); rays that miss return NaN. Intersections outside the
    textured extent count as misses.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    zlo, zhi = scene.height_bounds
    dz = dirs[:, 2]
    t = np.full(len(dirs), np.nan)
    down = dz < -1e-12
    if scene.spec.surface == "plane" or len(scene.hills) == 0:
        t[down] = (scene.spec.base_z - o[2]) / dz[down]
    else:
        idx = np.nonzero(down)[0]
        d = dirs[idx]
        t0 = np.maximum((zhi - o[2]) / d[:, 2], 0.0)
        t1 = (zlo - o[2]) / d[:, 2]

        def g(tt):
            p = o + tt[:, None] * d
            return p[:, 2] - scene.height_at(p[:, 0], p[:, 1])

        lo = t0.copy()
        hi = np.full(len(idx), np.nan)
        found = np.zeros(len(idx), bool)
        prev = t0
        for s in range(1, n_steps + 1):
            cur = t0 + (t1 - t0) * (s / n_steps)
            hit = ~found & (g(cur) <= 0)
            lo[hit] = prev[hit]
            hi[hit] = cur[hit]
            found |= hit
            prev = cur
        a, b = lo[found], hi[found]
        dd = d[found]
        for _ in range(n_bisect):
            m = 0.5 * (a + b)
            p = o + m[:, None] * dd
            below = p[:, 2] - scene.height_at(p[:, 0], p[:, 1]) <= 0
            b = np.where(below, m, b)
            a = np.where(below, a, m)
        tt = np.full(len(idx), np.nan)
        tt[found] = 0.5 * (a + b)
        t[idx] = tt
    hit = np.isfinite(t)
    p = o + np.where(hit, t, 0.0)[:, None] * dirs
    t[hit & ~scene.inside(p[:, 0], p[:, 1])] = np.nan
    return t


def render_view(scene, view, noise=True):
    """Ray-cast ``view``; returns ``(raster uint8, ground-truth depth)``.

    Depth is the camera-frame z of the first surface hit (NaN for background).
    Intensities are supersampled ``spec.supersample``^2 times per pixel, then
    per-view Gaussian sensor noise is added before 8-bit quantisation.
    """
    H, W = view.height, view.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([uu.ravel(), vv.ravel()], axis=1)
    rays = view.pixel_rays(pix) @ view.rotation   # unit camera z, so t == depth
    depth = cast_rays(scene, view.center, rays)
    if not np.isfinite(depth).any():
        raise NoIntersection(f"view {view.image_id} does not see the terrain")
    s = scene.spec.supersample
    acc = np.zeros(H * W)
    offs = (np.arange(s) + 0.5) / s - 0.5
    for oy in offs:
        for ox in offs:
            sub = pix + np.array([ox, oy])
            r = view.pixel_rays(sub) @ view.rotation
            t = depth if (s == 1) else cast_rays(scene, view.center, r, n_bisect=24)
            hit = np.isfinite(t)
            p = view.center + np.where(hit, t, 0.0)[:, None] * r
            val = np.zeros(H * W)
            val[hit] = scene.albedo(p[hit, 0], p[hit, 1])
            acc += val
    img = acc / (s * s)
    if noise and scene.spec.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, 1000 + int(view.image_id)])
        img = img + rng.normal(0.0, scene.spec.noise_sigma, img.shape)
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(H, W)
    return raster, depth.reshape(H, W)


def render_scene(scene, noise=True):
    """Render every camera; returns (views with rasters, list of GT depth arrays)."""
    out, depths = [], []
    for v in scene.views:
        raster, depth = render_view(scene, v, noise)
        out.append(v.with_raster(raster))
        depths.append(depth)
    return out, depths
