"""Relighting metrics between predicted and ground-truth environment maps.

Both maps light the same spheres (mirror, diffuse, glossy, matte) and the
renders are compared. RMSE and SSIM use clipped sRGB renders at EV 0;
scale-invariant RMSE fits its scale on linear renders; the RGB angular error
compares linear color vectors so that it ignores intensity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .color import luminance, srgb_encode
from .envmap import HdriMap, solid_angle_map, texel_directions
from .geom_maps import CameraModel, SphereSpec, sphere_crop
from .render import DEFAULT_SAMPLES, EVAL_MATERIALS, make_plan

METRIC_NAMES = ("rmse", "si_rmse", "ssim", "angular_error_deg")
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
EVAL_CAMERA = CameraModel(64, 64, math.radians(40.0))
EVAL_SPHERE = SphereSpec((0.0, 0.0, -3.0), 1.0)


def _pair(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:2] if pred.ndim == 3 else pred.shape[:1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric mask is empty")
    return pred, gt, mask


def rmse(pred, gt, mask=None) -> float:
    """Root mean squared error over masked pixels and channels."""
    pred, gt, mask = _pair(pred, gt, mask)
    d = pred[mask] - gt[mask]
    return float(np.sqrt(np.mean(d * d)))


def optimal_scale(pred, gt, mask=None) -> float:
    """Least-squares scale ``<pred, gt> / <pred, pred>``; 0 for an all-zero ``pred``."""
    pred, gt, mask = _pair(pred, gt, mask)
    p, g = pred[mask].ravel(), gt[mask].ravel()
    pp = float(p @ p)
    return float(p @ g) / pp if pp > 0 else 0.0


def si_rmse(pred, gt, mask=None, encode: bool = True) -> float:
    """RMSE after scaling linear ``pred`` by its optimal factor against ``gt``.

    With ``encode`` both sides are sRGB-encoded (and clipped) before the
    comparison; otherwise the comparison is linear.
    """
    pred, gt, mask = _pair(pred, gt, mask)
    scaled = optimal_scale(pred, gt, mask) * pred
    if encode:
        return rmse(srgb_encode(scaled), srgb_encode(gt), mask)
    return rmse(scaled, gt, mask)


def ssim_map(pred, gt, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape[:2]}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def blur(x):
        return ndimage.gaussian_filter(x, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), truncate=truncate, mode="reflect")

    mx, my = blur(pred), blur(gt)
    vx = blur(pred * pred) - mx * mx
    vy = blur(gt * gt) - my * my
    cxy = blur(pred * gt) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return s.mean(axis=-1)


def ssim(pred, gt, mask=None) -> float:
    """Masked mean SSIM of images in [0, 1]."""
    pred, gt, mask = _pair(pred, gt, mask)
    return float(ssim_map(pred, gt)[mask].mean())


def angular_error(pred, gt, mask=None) -> float:
    """Mean angle in degrees between RGB vectors, skipping pixels where either is zero."""
    pred, gt, mask = _pair(pred, gt, mask)
    p, g = pred[mask], gt[mask]
    npn = np.linalg.norm(p, axis=-1)
    ngn = np.linalg.norm(g, axis=-1)
    ok = (npn > 0) & (ngn > 0)
    if not ok.any():
        raise ValueError("angular error undefined: every pixel is black")
    # atan2 stays accurate near 0 degrees, where arccos of a rounded cosine does not
    p, g = p[ok], g[ok]
    sin = np.linalg.norm(np.cross(p, g), axis=-1)
    cos = np.einsum("nc,nc->n", p, g)
    return float(np.degrees(np.arctan2(sin, cos)).mean())


@dataclass
class MetricsReport:
    """Per-frame, per-material metric rows plus their mean over frames."""

    rows: list[dict] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        out = []
        for material in dict.fromkeys(r["material"] for r in self.rows):
            sel = [r for r in self.rows if r["material"] == material]
            row = {"frame": "mean", "material": material}
            row.update({k: float(np.mean([r[k] for r in sel])) for k in METRIC_NAMES})
            out.append(row)
        return out

    def get(self, material: str, metric: str, frame=None) -> float:
        rows = self.aggregate() if frame is None else [r for r in self.rows if r["frame"] == frame]
        for r in rows:
            if r["material"] == material:
                return r[metric]
        raise KeyError(f"no row for material {material!r}, frame {frame!r}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["frame", "material", *METRIC_NAMES])
            writer.writeheader()
            writer.writerows(self.rows + self.aggregate())

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"frames": self.rows, "mean": self.aggregate()}, indent=2))


def _env_array(env) -> np.ndarray:
    return env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)


def compare_renders(pred_env, gt_env, material, crop, samples: int = DEFAULT_SAMPLES, seed=0) -> dict:
    """All metrics for one material under both maps.

    Sampled materials share one plan whose importance follows the average of
    the two maps, so both renders see the same random directions.
    """
    p_env, g_env = _env_array(pred_env), _env_array(gt_env)
    if p_env.shape != g_env.shape:
        raise ValueError(f"env shapes differ: {p_env.shape} vs {g_env.shape}")
    m = crop.mask
    plan = make_plan(0.5 * (p_env + g_env), crop.normals[m], crop.view_dirs[m], material, samples, seed)
    lin_p = np.zeros(m.shape + (3,))
    lin_g = np.zeros(m.shape + (3,))
    lin_p[m] = plan.apply(p_env)
    lin_g[m] = plan.apply(g_env)
    enc_p, enc_g = srgb_encode(lin_p), srgb_encode(lin_g)
    return {
        "rmse": rmse(enc_p, enc_g, m),
        "si_rmse": si_rmse(lin_p, lin_g, m),
        "ssim": ssim(enc_p, enc_g, m),
        "angular_error_deg": angular_error(lin_p, lin_g, m),
    }


def evaluate(pred_envs, gt_envs, camera: CameraModel = EVAL_CAMERA, sphere: SphereSpec = EVAL_SPHERE,
             seed: int = 0, samples: int = DEFAULT_SAMPLES, materials=EVAL_MATERIALS) -> MetricsReport:
    """Relight spheres with every predicted and ground-truth frame and compare."""
    if isinstance(pred_envs, (HdriMap, np.ndarray)):
        pred_envs = [pred_envs]
    if isinstance(gt_envs, (HdriMap, np.ndarray)):
        gt_envs = [gt_envs]
    if len(pred_envs) != len(gt_envs):
        raise ValueError(f"frame count mismatch: {len(pred_envs)} predicted vs {len(gt_envs)} ground truth")
    crop = sphere_crop(camera, sphere)
    report = MetricsReport()
    for t, (p, g) in enumerate(zip(pred_envs, gt_envs)):
        for material in materials:
            kind = material if isinstance(material, str) else material.kind
            row = {"frame": t, "material": kind}
            row.update(compare_renders(p, g, material, crop, samples, seed + t))
            report.rows.append(row)
    return report


def dominant_direction(env, fraction: float = 0.25) -> np.ndarray:
    """Flux-weighted mean direction of texels brighter than ``fraction`` of the peak."""
    data = _env_array(env)
    h, w = data.shape[:2]
    lum = luminance(data)
    sel = lum >= fraction * lum.max()
    flux = (lum * solid_angle_map(w, h))[sel]
    v = flux @ texel_directions(w, h)[sel]
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("environment has no dominant direction")
    return v / n


def peak_radiance(env, angular_radius: float, direction=None) -> float:
    """Mean luminance inside a cone of ``angular_radius`` around the dominant direction.

    Measures a light's radiance at its own angular scale, which is robust to
    how the reconstruction distributes energy among neighboring texels.
    """
    data = _env_array(env)
    h, w = data.shape[:2]
    axis = dominant_direction(data) if direction is None else np.asarray(direction, dtype=np.float64)
    cone = texel_directions(w, h) @ axis >= math.cos(angular_radius)
    if not cone.any():
        raise ValueError("cone contains no texel centers; use a larger angular radius")
    dw = solid_angle_map(w, h)[cone]
    return float(luminance(data)[cone] @ dw / dw.sum())


def angle_between(a, b) -> float:
    """Angle between two directions in degrees."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
