"""Pinhole camera geometry: projection, triangulation, rectification, view classes.

Conventions: pixel ``(u, v)`` is (column, row) with pixel centres on integer
coordinates; ``rotation`` maps world vectors into the camera frame, so a world
point ``X`` has camera coordinates ``rotation @ (X - center)`` and the optical
axis in world coordinates is ``rotation[2]``.
"""

from dataclasses import InitVar, dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import (
    CoincidentCenters,
    DegeneratePoint,
    ExcessiveConvergence,
    InputError,
    NonPositiveDepth,
    NonPositiveDisparity,
    ParallelRays,
)

WORLD_DOWN = (0.0, 0.0, -1.0)


@dataclass(frozen=True, eq=False)
class CameraView:
    """An oriented pinhole camera and (optionally) its grayscale raster."""

    image_id: int
    width: int
    height: int
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    rotation: np.ndarray
    center: np.ndarray
    raster: np.ndarray | None = None
    depth_prior: tuple[float, float] | None = None
    image_path: str | None = field(default=None, compare=False)
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)
        if not validate:
            return
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise InputError(f"view {self.image_id}: rotation is not a proper rotation matrix")
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise InputError(f"view {self.image_id}: focal lengths must be positive")
        if not (0 <= self.principal_x < self.width and 0 <= self.principal_y < self.height):
            raise InputError(f"view {self.image_id}: principal point outside the image")
        if self.raster is not None:
            r = np.asarray(self.raster)
            if r.shape != (self.height, self.width):
                raise InputError(
                    f"view {self.image_id}: raster shape {r.shape} != ({self.height}, {self.width})"
                )
            object.__setattr__(self, "raster", r.astype(np.uint8, copy=False))

    @property
    def K(self):
        return np.array(
            [[self.focal_x, 0.0, self.principal_x], [0.0, self.focal_y, self.principal_y], [0.0, 0.0, 1.0]]
        )

    @property
    def optical_axis(self):
        return self.rotation[2].copy()

    def with_raster(self, raster):
        return CameraView(
            self.image_id, self.width, self.height, self.focal_x, self.focal_y,
            self.principal_x, self.principal_y, self.rotation, self.center,
            raster, self.depth_prior, self.image_path,
        )

    def to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def pixel_rays(self, pixels):
        """Camera-frame ray directions with unit z for an (..., 2) array of pixels."""
        px = np.asarray(pixels, dtype=np.float64)
        x = (px[..., 0] - self.principal_x) / self.focal_x
        y = (px[..., 1] - self.principal_y) / self.focal_y
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def back_project(self, pixels, depth):
        """World points at camera-frame depth ``depth`` along the given pixel rays."""
        rays = self.pixel_rays(pixels) * np.asarray(depth, dtype=np.float64)[..., None]
        return rays @ self.rotation + self.center

    def project_many(self, points):
        """Vectorised projection; returns (pixels, depth). No depth check."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal_x * pc[..., 0] / z + self.principal_x
            v = self.focal_y * pc[..., 1] / z + self.principal_y
        return np.stack([u, v], axis=-1), z


def project(point, view):
    """Project a world point into ``view``; raises NonPositiveDepth behind the camera."""
    pc = view.rotation @ (np.asarray(point, dtype=np.float64) - view.center)
    if pc[2] <= 1e-12:
        raise NonPositiveDepth(f"point has depth {pc[2]:.3g} in view {view.image_id}")
    return np.array(
        [view.focal_x * pc[0] / pc[2] + view.principal_x, view.focal_y * pc[1] / pc[2] + view.principal_y]
    )


def triangulate(px_a, view_a, px_b, view_b):
    """Midpoint of the common perpendicular of two back-projected rays.

    Returns ``(point, ray_gap)`` where ``ray_gap`` is the length of the
    perpendicular segment.
    """
    ca, cb = view_a.center, view_b.center
    if np.linalg.norm(cb - ca) < 1e-12:
        raise CoincidentCenters(f"views {view_a.image_id} and {view_b.image_id} share a center")
    da = view_a.pixel_rays(px_a) @ view_a.rotation
    db = view_b.pixel_rays(px_b) @ view_b.rotation
    da = da / np.linalg.norm(da)
    db = db / np.linalg.norm(db)
    if np.linalg.norm(np.cross(da, db)) < 1e-12:
        raise ParallelRays("rays are parallel")
    w0 = ca - cb
    b = da @ db
    d = da @ w0
    e = db @ w0
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    pa = ca + s * da
    pb = cb + t * db
    return 0.5 * (pa + pb), float(np.linalg.norm(pa - pb))


def intersection_angle(point, center_a, center_b):
    """Angle in degrees subtended at ``point`` by two camera centres."""
    p = np.asarray(point, dtype=np.float64)
    va = np.asarray(center_a, dtype=np.float64) - p
    vb = np.asarray(center_b, dtype=np.float64) - p
    if np.linalg.norm(va) < 1e-12 or np.linalg.norm(vb) < 1e-12:
        raise DegeneratePoint("point coincides with a camera center")
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(va, vb)), va @ vb)))


def intersection_angles(points, center_a, center_b):
    """Vectorised :func:`intersection_angle` over an (N, 3) array, no degeneracy check."""
    p = np.asarray(points, dtype=np.float64)
    va = np.asarray(center_a, dtype=np.float64) - p
    vb = np.asarray(center_b, dtype=np.float64) - p
    cross = np.linalg.norm(np.cross(va, vb), axis=-1)
    dot = np.einsum("...i,...i->...", va, vb)
    return np.degrees(np.arctan2(cross, dot))


# --------------------------------------------------------------------------- rectification


@dataclass(frozen=True, eq=False)
class RectifiedPair:
    """Rotate-both-cameras rectification of an ordered image pair.

    ``left`` is the first view passed to :func:`rectify_pair`; the rectified
    x-axis points from the left centre to the right centre, so disparity
    ``d = u_left - u_right = rectified_focal * baseline / Z`` is positive for
    points in front of both cameras.
    """

    left_id: int
    right_id: int
    left_rectify_rot: np.ndarray
    right_rectify_rot: np.ndarray
    rect_rotation: np.ndarray
    rectified_focal: float
    baseline: float
    width: int
    height: int
    principal_x: float
    principal_y: float
    disparity_range: tuple[int, int]
    left_center: np.ndarray
    right_center: np.ndarray

    def rectified_view(self, side):
        center = self.left_center if side == "left" else self.right_center
        image_id = self.left_id if side == "left" else self.right_id
        return CameraView(
            image_id, self.width, self.height, self.rectified_focal, self.rectified_focal,
            self.principal_x, self.principal_y, self.rect_rotation, center, validate=False,
        )

    def to_rectified(self, view, pixels):
        """Map original pixels of ``view`` (left or right) to rectified pixel coordinates."""
        rot = self.left_rectify_rot if view.image_id == self.left_id else self.right_rectify_rot
        rays = view.pixel_rays(pixels) @ rot.T
        z = rays[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.rectified_focal * rays[..., 0] / z + self.principal_x
            v = self.rectified_focal * rays[..., 1] / z + self.principal_y
        return np.stack([u, v], axis=-1), z

    def from_rectified(self, view, pixels):
        """Map rectified pixels back to original pixel coordinates of ``view``."""
        rot = self.left_rectify_rot if view.image_id == self.left_id else self.right_rectify_rot
        px = np.asarray(pixels, dtype=np.float64)
        rays = np.stack(
            [
                (px[..., 0] - self.principal_x) / self.rectified_focal,
                (px[..., 1] - self.principal_y) / self.rectified_focal,
                np.ones(px.shape[:-1]),
            ],
            axis=-1,
        ) @ rot
        z = rays[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = view.focal_x * rays[..., 0] / z + view.principal_x
            v = view.focal_y * rays[..., 1] / z + view.principal_y
        return np.stack([u, v], axis=-1), z

    def resample(self, view):
        """Bilinearly warp ``view.raster`` into the rectified frame.

        Returns ``(image, mask)`` with ``image`` float64 and ``mask`` true where
        the source sample lies inside the original raster.
        """
        vv, uu = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        src, z = self.from_rectified(view, np.stack([uu, vv], axis=-1))
        su, sv = src[..., 0], src[..., 1]
        mask = (z > 0) & (su >= 0) & (su <= view.width - 1) & (sv >= 0) & (sv <= view.height - 1)
        su = np.where(mask, su, 0.0)
        sv = np.where(mask, sv, 0.0)
        img = ndimage.map_coordinates(view.raster.astype(np.float64), [sv, su], order=1, mode="nearest")
        img[~mask] = 0.0
        return img, mask


def _frustum_corners(view, z_near, z_far):
    px = np.array(
        [[0, 0], [view.width - 1, 0], [0, view.height - 1], [view.width - 1, view.height - 1],
         [view.principal_x, view.principal_y]],
        dtype=np.float64,
    )
    return np.concatenate([view.back_project(px, np.full(5, z_near)), view.back_project(px, np.full(5, z_far))])


def rectify_pair(view_a, view_b, d_range_margin=2, depth_prior=None, max_scale=2.5):
    """Rectify ``(view_a, view_b)`` so epipolar lines become image rows.

    ``depth_prior`` (defaults to ``view_a.depth_prior``) bounds scene depth and
    determines the integer disparity search range, widened by
    ``d_range_margin`` pixels on each side.
    """
    base = view_b.center - view_a.center
    B = float(np.linalg.norm(base))
    if B < 1e-6:
        raise CoincidentCenters(f"views {view_a.image_id} and {view_b.image_id} have coincident centers")
    za, zb = view_a.optical_axis, view_b.optical_axis
    if za @ zb < 0:
        raise ExcessiveConvergence(
            f"optical axes of views {view_a.image_id} and {view_b.image_id} diverge by more than 90 degrees"
        )
    x_new = base / B
    z_avg = za + zb
    z_new = z_avg - (z_avg @ x_new) * x_new
    nz = np.linalg.norm(z_new)
    if nz < 1e-9:
        raise ExcessiveConvergence("mean optical axis is parallel to the baseline")
    z_new /= nz
    y_new = np.cross(z_new, x_new)
    R_rect = np.stack([x_new, y_new, z_new])
    rot_a = R_rect @ view_a.rotation.T
    rot_b = R_rect @ view_b.rotation.T
    f = float(np.mean([view_a.focal_x, view_a.focal_y, view_b.focal_x, view_b.focal_y]))

    # rectified image box: union of both warped image outlines, clipped to a sane size
    us, vs = [], []
    for view, rot in ((view_a, rot_a), (view_b, rot_b)):
        edge = np.linspace(0.0, 1.0, 17)
        W1, H1 = view.width - 1, view.height - 1
        border = np.concatenate([
            np.stack([edge * W1, np.zeros_like(edge)], 1), np.stack([edge * W1, np.full_like(edge, H1)], 1),
            np.stack([np.zeros_like(edge), edge * H1], 1), np.stack([np.full_like(edge, W1), edge * H1], 1),
        ])
        rays = view.pixel_rays(border) @ rot.T
        front = rays[:, 2] > 1e-6
        if not front.all():
            raise ExcessiveConvergence(
                f"view {view.image_id} is not fully in front of the rectified image plane"
            )
        us.append(f * rays[:, 0] / rays[:, 2])
        vs.append(f * rays[:, 1] / rays[:, 2])
    us, vs = np.concatenate(us), np.concatenate(vs)
    span = max_scale * max(view_a.width, view_a.height, view_b.width, view_b.height)
    u0, u1 = max(us.min(), -span), min(us.max(), span)
    v0, v1 = max(vs.min(), -span), min(vs.max(), span)
    width = int(np.ceil(u1 - u0 - 1e-9)) + 1
    height = int(np.ceil(v1 - v0 - 1e-9)) + 1
    cx, cy = -u0, -v0

    prior = depth_prior if depth_prior is not None else view_a.depth_prior
    if prior is None:
        raise InputError(f"view {view_a.image_id} has no depth prior")
    z_near, z_far = float(prior[0]), float(prior[1])
    corners = _frustum_corners(view_a, z_near, z_far)
    zr = (corners - view_a.center) @ R_rect[2]
    zr = zr[zr > 1e-9]
    if zr.size == 0:
        raise ExcessiveConvergence("depth prior lies behind the rectified cameras")
    d_min = int(np.floor(f * B / zr.max())) - int(d_range_margin)
    d_max = int(np.ceil(f * B / zr.min())) + int(d_range_margin)
    d_min = max(d_min, 0)
    return RectifiedPair(
        left_id=view_a.image_id, right_id=view_b.image_id,
        left_rectify_rot=rot_a, right_rectify_rot=rot_b, rect_rotation=R_rect,
        rectified_focal=f, baseline=B, width=width, height=height,
        principal_x=float(cx), principal_y=float(cy),
        disparity_range=(d_min, max(d_max, d_min)),
        left_center=view_a.center.copy(), right_center=view_b.center.copy(),
    )


def disparity_to_depth(d, pair):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDisparity("disparity must be positive")
    z = pair.rectified_focal * pair.baseline / d
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(z, pair):
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("depth must be positive")
    d = pair.rectified_focal * pair.baseline / z
    return float(d) if d.ndim == 0 else d


# --------------------------------------------------------------------------- view classes


class ViewKind(str, Enum):
    NADIR = "N"
    OBLIQUE = "O"


@dataclass(frozen=True)
class ViewClass:
    kind: ViewKind
    tilt_deg: float


def classify_view(view, tilt_threshold=20.0, down=WORLD_DOWN):
    """Nadir iff the optical axis is strictly within ``tilt_threshold`` degrees of ``down``."""
    d = np.asarray(down, dtype=np.float64)
    d = d / np.linalg.norm(d)
    axis = view.optical_axis
    tilt = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(axis, d)), axis @ d)))
    kind = ViewKind.NADIR if tilt < tilt_threshold else ViewKind.OBLIQUE
    return ViewClass(kind, tilt)


def pair_composition(class_a, class_b):
    """``"NN"``, ``"NO"`` or ``"OO"`` for two view classes (order-free)."""
    kinds = sorted([class_a.kind.value, class_b.kind.value])
    return "".join(kinds)
