"""Pinhole geometry, sphere rasterization, conditioning maps and probe placement.

All quantities live in the camera frame: y up, the camera looks down -z, and
a depth value is the distance along -z (z-depth). Image coordinates are
continuous with the origin at the top-left corner; pixel ``(row, col)`` has its
center at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEPTH_FACTOR_MIN = 0.25
DEPTH_FACTOR_MAX = 0.98
DEPTH_FACTOR_EXPONENT = 0.4


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    vertical_fov: float  # radians

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError(f"vertical_fov must be in (0, pi), got {self.vertical_fov}")

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / math.tan(0.5 * self.vertical_fov)

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * self.width, 0.5 * self.height

    def pixel_rays(self) -> np.ndarray:
        """Unit view directions through every pixel center, ``(H, W, 3)``."""
        cols = np.arange(self.width) + 0.5
        rows = np.arange(self.height) + 0.5
        xx, yy = np.meshgrid(cols, rows)
        d = _ray(self, xx, yy)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class SphereSpec:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ValueError("sphere center must have three components")
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")


@dataclass
class SphereHit:
    """Per-pixel ray/sphere intersection over the full camera image."""

    mask: np.ndarray  # (H, W) bool
    normals: np.ndarray  # (H, W, 3), zero off the mask
    points: np.ndarray  # (H, W, 3), zero off the mask
    view_dirs: np.ndarray  # (H, W, 3) unit rays for every pixel


@dataclass
class SphereCrop:
    """Sphere footprint cropped to its bounding box, as used for optimization."""

    mask: np.ndarray
    normals: np.ndarray
    view_dirs: np.ndarray
    positions: np.ndarray
    offset: tuple[int, int]  # (row, col) of the crop's top-left pixel

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class ConditionMaps:
    rgb_masked: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    dir: np.ndarray
    dist: np.ndarray
    sphere_mask: np.ndarray
    dir_valid: np.ndarray


@dataclass(frozen=True)
class PlacementSample:
    depth_factor: float
    sphere_depth: float
    image_center: tuple[float, float]
    image_radius: float


def _ray(camera: CameraModel, x, y) -> np.ndarray:
    cx, cy = camera.principal_point
    f = camera.focal
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.stack([(x - cx) / f, -(y - cy) / f, -np.ones_like(x)], axis=-1)


def unproject(camera: CameraModel, pixel, depth) -> np.ndarray:
    """3D camera-frame point at continuous pixel ``(x, y)`` and z-depth ``depth``."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject needs positive depth")
    pixel = np.asarray(pixel, dtype=np.float64)
    return _ray(camera, pixel[..., 0], pixel[..., 1]) * depth[..., None]


def project(camera: CameraModel, points) -> np.ndarray:
    """Continuous pixel coordinates ``(x, y)`` of camera-frame points in front of the camera."""
    p = np.asarray(points, dtype=np.float64)
    cx, cy = camera.principal_point
    z = -p[..., 2]
    return np.stack([cx + camera.focal * p[..., 0] / z, cy - camera.focal * p[..., 1] / z], axis=-1)


def scene_points(camera: CameraModel, depth_map) -> np.ndarray:
    """Unproject every pixel center of a ``(H, W)`` z-depth map."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.shape != (camera.height, camera.width):
        raise ValueError(f"depth map shape {depth_map.shape} does not match camera {(camera.height, camera.width)}")
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(camera.height) + 0.5
    xx, yy = np.meshgrid(cols, rows)
    return _ray(camera, xx, yy) * depth_map[..., None]


def reflect(v, n) -> np.ndarray:
    """Mirror ``v`` about ``n``: ``v - 2 (v . n) n``."""
    v = np.asarray(v, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def sphere_normals(camera: CameraModel, sphere: SphereSpec) -> SphereHit:
    """Analytic ray/sphere intersection for every pixel center."""
    c = np.asarray(sphere.center)
    if np.dot(c, c) <= sphere.radius**2:
        raise ValueError("camera origin lies inside the sphere")
    rays = camera.pixel_rays()
    b = rays @ c
    disc = b * b - (np.dot(c, c) - sphere.radius**2)
    root = np.sqrt(np.maximum(disc, 0.0))
    t = b - root
    mask = (disc >= 0) & (t > 0)
    points = np.where(mask[..., None], rays * t[..., None], 0.0)
    normals = np.where(mask[..., None], (points - c) / sphere.radius, 0.0)
    nrm = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = np.divide(normals, nrm, out=np.zeros_like(normals), where=nrm > 0)
    return SphereHit(mask=mask, normals=normals, points=points, view_dirs=rays)


def sphere_crop(camera: CameraModel, sphere: SphereSpec, pad: int = 1) -> SphereCrop:
    """Bounding-box crop of the sphere footprint, padded by ``pad`` pixels."""
    hit = sphere_normals(camera, sphere)
    rows, cols = np.nonzero(hit.mask)
    if rows.size == 0:
        raise ValueError("sphere is not visible from the camera")
    r0 = max(rows.min() - pad, 0)
    r1 = min(rows.max() + pad + 1, camera.height)
    c0 = max(cols.min() - pad, 0)
    c1 = min(cols.max() + pad + 1, camera.width)
    win = (slice(r0, r1), slice(c0, c1))
    return SphereCrop(
        mask=hit.mask[win].copy(),
        normals=hit.normals[win].copy(),
        view_dirs=hit.view_dirs[win].copy(),
        positions=hit.points[win].copy(),
        offset=(int(r0), int(c0)),
    )


def composite_points(camera: CameraModel, depth_map, sphere: SphereSpec) -> tuple[np.ndarray, SphereHit]:
    """Scene points with the sphere surface composited over its footprint."""
    hit = sphere_normals(camera, sphere)
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if np.any(depth_map[np.isfinite(depth_map)] <= 0):
        raise ValueError("depth map must be positive where defined")
    pts = scene_points(camera, np.where(np.isfinite(depth_map), depth_map, np.nan))
    pts = np.where(hit.mask[..., None], hit.points, pts)
    return pts, hit


def direction_map(camera: CameraModel, depth_map, sphere: SphereSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel unit direction map and its validity flag.

    Off the sphere: unit vector from the sphere center toward the scene point.
    On the sphere: the mirror-reflected view ray. Pixels whose point coincides
    with the center, or whose depth is undefined, get a zero vector and
    ``valid = False``.
    """
    pts, hit = composite_points(camera, depth_map, sphere)
    delta = pts - np.asarray(sphere.center)
    norm = np.linalg.norm(delta, axis=-1, keepdims=True)
    ok = np.isfinite(norm[..., 0]) & (norm[..., 0] > 0)
    dirs = np.zeros_like(delta)
    np.divide(delta, norm, out=dirs, where=ok[..., None])
    refl = reflect(hit.view_dirs, hit.normals)
    refl /= np.linalg.norm(refl, axis=-1, keepdims=True)
    dirs = np.where(hit.mask[..., None], refl, dirs)
    valid = ok | hit.mask
    return dirs, valid


def distance_map(camera: CameraModel, depth_map, sphere: SphereSpec) -> np.ndarray:
    """Raw per-pixel distance ``||p - c||`` (NaN where depth is undefined)."""
    pts, _ = composite_points(camera, depth_map, sphere)
    return np.linalg.norm(pts - np.asarray(sphere.center), axis=-1)


def log_normalize(values, valid=None) -> np.ndarray:
    """``log(1 + x)`` min-max normalized to [0, 1] over the valid pixels; 0 elsewhere."""
    x = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(x) if valid is None else (np.asarray(valid, dtype=bool) & np.isfinite(x))
    out = np.zeros_like(x)
    if not valid.any():
        return out
    logged = np.log1p(np.maximum(x[valid], 0.0))
    lo, hi = logged.min(), logged.max()
    out[valid] = (logged - lo) / (hi - lo) if hi > lo else 0.0
    return out


def condition_maps(rgb, depth_map, camera: CameraModel, sphere: SphereSpec) -> ConditionMaps:
    """The five conditioning maps plus the sphere footprint mask."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[:2] != (camera.height, camera.width):
        raise ValueError("rgb image does not match the camera resolution")
    pts, hit = composite_points(camera, depth_map, sphere)
    z = -pts[..., 2]
    dirs, valid = direction_map(camera, depth_map, sphere)
    dist = np.linalg.norm(pts - np.asarray(sphere.center), axis=-1)
    return ConditionMaps(
        rgb_masked=np.where(hit.mask[..., None], 0.0, rgb),
        depth=log_normalize(z),
        normals=hit.normals,
        dir=dirs,
        dist=log_normalize(dist),
        sphere_mask=hit.mask,
        dir_valid=valid,
    )


# ---------------------------------------------------------------------------
# Placement and animation
# ---------------------------------------------------------------------------

def sample_depth_factor(u) -> np.ndarray | float:
    """Depth factor ``0.25 + 0.73 u**0.4`` for uniform ``u`` in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u must lie in [0, 1]")
    out = DEPTH_FACTOR_MIN + (DEPTH_FACTOR_MAX - DEPTH_FACTOR_MIN) * np.power(u, DEPTH_FACTOR_EXPONENT)
    return float(out) if out.ndim == 0 else out


def sphere_scene_depth(depth_factor: float, depth_map, footprint_mask) -> float:
    """Sphere depth: the factor times the minimum scene depth under the footprint."""
    mask = np.asarray(footprint_mask, dtype=bool)
    if not mask.any():
        raise ValueError("sphere footprint mask is empty")
    under = np.asarray(depth_map, dtype=np.float64)[mask]
    if np.any(~np.isfinite(under)) or np.any(under <= 0):
        raise ValueError("depth must be positive and finite under the sphere footprint")
    return float(depth_factor * under.min())


def radius_for_angle(distance: float, angular_radius: float) -> float:
    """World radius of a sphere at ``distance`` subtending ``angular_radius``."""
    return float(distance * math.sin(angular_radius))


def world_radius(distance: float, camera: CameraModel, image_radius_fraction: float) -> float:
    """World radius giving an on-axis silhouette radius of ``rho * H / 2`` pixels.

    The half-angle is ``atan(rho * tan(vfov / 2))`` so that the projected
    silhouette, ``f * tan(half-angle)``, equals ``rho * H / 2``.
    """
    half_angle = math.atan(image_radius_fraction * math.tan(0.5 * camera.vertical_fov))
    return radius_for_angle(distance, half_angle)


def footprint_mask(camera: CameraModel, image_center, image_radius_px: float) -> np.ndarray:
    """Disk of pixel centers within ``image_radius_px`` of ``image_center``."""
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(camera.height) + 0.5
    xx, yy = np.meshgrid(cols, rows)
    return (xx - image_center[0]) ** 2 + (yy - image_center[1]) ** 2 <= image_radius_px**2


def sample_placement(camera: CameraModel, depth_map, image_radius_fraction: float,
                     rng: np.random.Generator, image_center=None) -> tuple[PlacementSample, SphereSpec]:
    """Draw a sphere placement in front of the scene geometry under its footprint."""
    radius_px = 0.5 * image_radius_fraction * camera.height
    if image_center is None:
        image_center = (rng.uniform(radius_px, camera.width - radius_px),
                        rng.uniform(radius_px, camera.height - radius_px))
    delta = sample_depth_factor(rng.uniform())
    mask = footprint_mask(camera, image_center, radius_px)
    d_sph = sphere_scene_depth(delta, depth_map, mask)
    center = unproject(camera, np.asarray(image_center, dtype=np.float64), d_sph)
    radius = world_radius(float(np.linalg.norm(center)), camera, image_radius_fraction)
    sample = PlacementSample(delta, d_sph, tuple(image_center), image_radius_fraction)
    return sample, SphereSpec(tuple(center), radius)


def animate(spec0: SphereSpec, spec1: SphereSpec, frames: int) -> list[SphereSpec]:
    """Linear interpolation of center and radius over ``frames`` frames."""
    if frames < 2:
        raise ValueError("animate needs at least two frames")
    c0 = np.asarray(spec0.center)
    c1 = np.asarray(spec1.center)
    out = []
    for i in range(frames):
        if i == 0:
            out.append(spec0)
        elif i == frames - 1:
            out.append(spec1)
        else:
            t = i / (frames - 1)
            out.append(SphereSpec(tuple(c0 + t * (c1 - c0)), spec0.radius + t * (spec1.radius - spec0.radius)))
    return out
