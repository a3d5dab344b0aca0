"""Sphere renderer under distant equirectangular lighting.

Every render is linear in the environment texels once its sampling decisions
are fixed, so each material first builds a :class:`RenderPlan` (texel indices
and weights per sphere pixel) and the image is ``plan.apply(env)``. The same
plan gives the exact vector-Jacobian product through ``plan.adjoint``; sample
positions and importance densities are treated as constants (detached).

Mirror spheres use a bilinear lookup in the reflected direction. Diffuse
spheres use a Monte Carlo estimate of ``(1/pi) * integral L(w) max(0, n.w) dw``
with texels drawn proportionally to cosine x luminance x texel area and
evaluated at their centers. Glossy and matte
spheres are forward-only normalized cosine-power lobes for evaluation.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .color import apply_exposure, luminance, srgb_encode, srgb_encode_grad
from .envmap import (
    HdriMap,
    LaplacianPyramid,
    bilinear_taps,
    compose_log2,
    compose_log2_adjoint,
    dir_to_pixel,
    pixel_to_dir,
    solid_angle_map,
    texel_directions,
)
from .geom_maps import SphereCrop, reflect

DEFAULT_SAMPLES = 64
GLOSSY_EXPONENT = 512.0
MATTE_EXPONENT = 32.0
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

# Coarse importance grid for diffuse sampling has at least this many rows.
_CELL_ROWS = 32


@dataclass(frozen=True)
class Material:
    kind: str
    lobe_exponent: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("mirror", "diffuse", "glossy", "matte"):
            raise ValueError(f"unknown material {self.kind!r}")
        if self.kind in ("glossy", "matte"):
            if self.lobe_exponent is None:
                default = GLOSSY_EXPONENT if self.kind == "glossy" else MATTE_EXPONENT
                object.__setattr__(self, "lobe_exponent", default)
            if not self.lobe_exponent > 0:
                raise ValueError("lobe exponent must be positive")

    @property
    def roughness(self) -> float:
        return {"mirror": 0.0, "diffuse": 1.0}.get(self.kind, math.sqrt(2.0 / (self.lobe_exponent + 2.0)))

    @property
    def metallic(self) -> float:
        return 0.0 if self.kind == "diffuse" else 1.0

    @property
    def albedo(self) -> tuple[float, float, float]:
        return (1.0, 1.0, 1.0)

    @classmethod
    def parse(cls, value: "Material | str") -> "Material":
        return value if isinstance(value, Material) else cls(str(value).lower())


MIRROR = Material("mirror")
DIFFUSE = Material("diffuse")
GLOSSY = Material("glossy")
MATTE = Material("matte")
EVAL_MATERIALS = (MIRROR, DIFFUSE, GLOSSY, MATTE)


@dataclass
class RenderPlan:
    """Sparse linear map from env texels to sphere pixels.

    ``pixel[n] = sum_k weights[n, k] * env_flat[indices[n, k]]``.
    """

    indices: np.ndarray  # (N, K) int64
    weights: np.ndarray  # (N, K) float64
    env_shape: tuple[int, int]

    def apply(self, env) -> np.ndarray:
        data = env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)
        if data.shape[:2] != self.env_shape:
            raise ValueError(f"plan built for env {self.env_shape}, got {data.shape[:2]}")
        flat = data.reshape(-1, data.shape[-1])
        return np.einsum("nk,nkc->nc", self.weights, flat[self.indices])

    def adjoint(self, grad) -> np.ndarray:
        """Gradient on env texels ``(H, W, C)`` from a pixel gradient ``(N, C)``."""
        grad = np.asarray(grad, dtype=np.float64)
        h, w = self.env_shape
        idx = self.indices.ravel()
        out = np.empty((h * w, grad.shape[1]))
        for c in range(grad.shape[1]):
            contrib = (self.weights * grad[:, c : c + 1]).ravel()
            # bincount accumulates in index order: deterministic
            out[:, c] = np.bincount(idx, weights=contrib, minlength=h * w)
        return out.reshape(h, w, grad.shape[1])


@dataclass
class SamplingTable:
    """Per-texel cosine x luminance importance for one surface normal."""

    weights: np.ndarray  # (H, W), sums to one
    pdf: np.ndarray  # (H, W), density per steradian
    cdf: np.ndarray  # (H*W,), ends at one


@dataclass
class SphereImage:
    pixels: np.ndarray  # (h, w, 3), zero outside the mask
    mask: np.ndarray
    normals: np.ndarray | None = None
    positions: np.ndarray | None = None


def _env_data(env) -> np.ndarray:
    return env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _flat(a) -> tuple[np.ndarray, tuple[int, ...]]:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 3), a.shape[:-1]


# ---------------------------------------------------------------------------
# Mirror
# ---------------------------------------------------------------------------

def mirror_plan(normals, view_dirs, env_shape: tuple[int, int]) -> RenderPlan:
    h, w = env_shape
    r = reflect(view_dirs, normals)
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    u, v = dir_to_pixel(r, w, h)
    idx, wt = bilinear_taps(u, v, w, h)
    return RenderPlan(idx, wt, (h, w))


def render_mirror(env, normals, view_dirs) -> np.ndarray:
    """Mirror-sphere radiance for pixels with the given normals and view rays."""
    data = _env_data(env)
    n, lead = _flat(normals)
    v, _ = _flat(view_dirs)
    return mirror_plan(n, v, data.shape[:2]).apply(data).reshape(*lead, 3)


# ---------------------------------------------------------------------------
# Diffuse
# ---------------------------------------------------------------------------

def build_sampling_table(env, normal) -> SamplingTable:
    """Exact per-texel importance ``max(0, n.r) * lum * sin(theta)`` for one normal.

    Falls back to cosine-only weights when the visible hemisphere is black.
    """
    data = _env_data(env)
    h, w = data.shape[:2]
    dirs = texel_directions(w, h)
    cos = np.maximum(dirs @ np.asarray(normal, dtype=np.float64), 0.0)
    sin_theta = np.sin(np.pi * (np.arange(h) + 0.5) / h)[:, None]
    wts = cos * luminance(data) * sin_theta
    if wts.sum() <= 0:
        wts = cos * sin_theta
    wts = wts / wts.sum()
    pdf = wts / solid_angle_map(w, h)
    return SamplingTable(weights=wts, pdf=pdf, cdf=np.cumsum(wts.ravel()))


def _cell_factor(h: int, w: int) -> int:
    k = 1
    while h // (2 * k) >= _CELL_ROWS and h % (2 * k) == 0 and w % (2 * k) == 0:
        k *= 2
    return k


def _corner_chord(width: int, height: int) -> np.ndarray:
    """Largest distance from each cell-center direction to its corners, ``(H, W)``."""
    cu = (np.arange(width) + 0.5) / width
    cv = (np.arange(height) + 0.5) / height
    centers = pixel_to_dir(*np.meshgrid(cu, cv))
    chord = np.zeros((height, width))
    for du in (0.0, 1.0):
        for dv in (0.0, 1.0):
            corner = pixel_to_dir(*np.meshgrid((np.arange(width) + du) / width, (np.arange(height) + dv) / height))
            chord = np.maximum(chord, np.linalg.norm(corner - centers, axis=-1))
    # bounds max over the cell of n.r - n.center
    return chord * 1.01 + 1e-9


def _group_cells(a: np.ndarray, k: int) -> np.ndarray:
    """(H, W, ...) -> (cells, k*k, ...) in row-major cell order."""
    h, w = a.shape[:2]
    rest = a.shape[2:]
    g = a.reshape(h // k, k, w // k, k, *rest)
    g = np.moveaxis(g, 2, 1)
    return g.reshape((h // k) * (w // k), k * k, *rest)


@numba.njit(cache=True, inline="always")
def _texel_cos(nx, ny, nz, rs, rc, cs, cc):
    return rs * (nx * cs - nz * cc) + ny * rc


@numba.njit(cache=True)
def _cell_weights(nx, ny, nz, top, tw, rs, rc, cs, cc, out):
    """Sum over each cell of ``tw * max(0, n . r_center)``; returns the total.

    Cells entirely above the horizon use their moment ``sum(tw * r)``; cells
    that may cross it are summed texel by texel.
    """
    rsin, rcos, rchord, csin, ccos, mom = top
    hc, wc, k = rsin.shape[0], csin.shape[0], rs.shape[1]
    total = 0.0
    for r0 in range(hc):
        for c0 in range(wc):
            cell = r0 * wc + c0
            ndc = rsin[r0] * (nx * csin[c0] - nz * ccos[c0]) + ny * rcos[r0]
            g = 0.0
            if ndc >= rchord[r0]:
                g = max(nx * mom[cell, 0] + ny * mom[cell, 1] + nz * mom[cell, 2], 0.0)
            elif ndc > -rchord[r0]:
                for i in range(k):
                    a = ny * rc[r0, i]
                    for j in range(k):
                        cos = rs[r0, i] * (nx * cs[c0, j] - nz * cc[c0, j]) + a
                        if cos > 0.0:
                            g += tw[cell, i * k + j] * cos
            out[cell] = g
            total += g
    return total


@numba.njit(cache=True, parallel=True)
def _diffuse_kernel(normals, tw_lum, tw_area, top_lum, top_area,
                    rs, rc, cs, cc, lum, uniforms, width):
    n_pix, samples = uniforms.shape[0], uniforms.shape[1]
    k = rs.shape[1]
    wc = cs.shape[0]
    n_cells = tw_lum.shape[0]
    indices = np.zeros((n_pix, samples), dtype=np.int64)
    weights = np.zeros((n_pix, samples))
    for p in numba.prange(n_pix):
        nx, ny, nz = normals[p, 0], normals[p, 1], normals[p, 2]
        g = np.empty(n_cells)
        tw = tw_lum
        by_lum = True
        total = _cell_weights(nx, ny, nz, top_lum, tw_lum, rs, rc, cs, cc, g)
        if total <= 0.0:
            # black visible hemisphere: cosine-only importance
            tw = tw_area
            by_lum = False
            total = _cell_weights(nx, ny, nz, top_area, tw_area, rs, rc, cs, cc, g)
        if total <= 0.0:
            continue
        cdf = np.cumsum(g)
        fine = np.empty(k * k)
        # first uniforms arrive sorted, so equal cells are consecutive
        last = -1
        fsum = 0.0
        for s in range(samples):
            c = min(np.searchsorted(cdf, uniforms[p, s, 0] * cdf[-1], side="right"), n_cells - 1)
            while g[c] <= 0.0 and c > 0:
                c -= 1
            cr, ccol = c // wc, c % wc
            if c != last:
                last = c
                fsum = 0.0
                for i in range(k):
                    for j in range(k):
                        cos = _texel_cos(nx, ny, nz, rs[cr, i], rc[cr, i], cs[ccol, j], cc[ccol, j])
                        fsum += tw[c, i * k + j] * max(cos, 0.0)
                        fine[i * k + j] = fsum
            if fsum <= 0.0:
                continue
            target = uniforms[p, s, 1] * fsum
            t = 0
            while t < k * k - 1 and (fine[t] <= target or fine[t] == (fine[t - 1] if t > 0 else 0.0)):
                t += 1
            f_t = fine[t] - (fine[t - 1] if t > 0 else 0.0)
            if f_t <= 0.0:
                continue
            i, j = t // k, t % k
            row, col = cr * k + i, ccol * k + j
            indices[p, s] = row * width + col
            # f / p with p proportional to lum * cos * dw: the cosine and dw cancel
            if by_lum:
                weights[p, s] = total / (np.pi * samples * lum[row * width + col])
            else:
                weights[p, s] = total / (np.pi * samples)
    return indices, weights


@lru_cache(maxsize=8)
def _cell_angles(hc: int, wc: int):
    theta = np.pi * (np.arange(hc) + 0.5) / hc
    phi = 2.0 * np.pi * ((np.arange(wc) + 0.5) / wc - 0.5)
    return np.sin(theta), np.cos(theta), np.ascontiguousarray(_corner_chord(wc, hc)[:, 0]), np.sin(phi), np.cos(phi)


def _cell_table(texel_w: np.ndarray, k: int):
    """Grouped texel weights and per-cell moments ``sum(w * r)``."""
    h, w = texel_w.shape
    tw = _group_cells(texel_w, k)
    mom = np.einsum("ct,ctd->cd", tw, _group_cells(texel_directions(w, h), k))
    return tw, (*_cell_angles(h // k, w // k), mom)


@lru_cache(maxsize=8)
def _diffuse_tables(h: int, w: int):
    k = _cell_factor(h, w)
    dw = solid_angle_map(w, h)
    theta = np.pi * (np.arange(h) + 0.5) / h
    phi = 2.0 * np.pi * ((np.arange(w) + 0.5) / w - 0.5)
    trig = (np.sin(theta).reshape(-1, k), np.cos(theta).reshape(-1, k),
            np.sin(phi).reshape(-1, k), np.cos(phi).reshape(-1, k))
    return k, trig, dw, _cell_table(dw, k)


def diffuse_plan(env, normals, samples: int = DEFAULT_SAMPLES, rng=None) -> RenderPlan:
    """Importance-sampled Lambertian plan for unit ``normals`` of shape ``(N, 3)``.

    Texels are drawn with probability proportional to
    ``lum * dw * max(0, n . r_center)`` in two stages (a ``k x k`` cell from
    its summed weight, then a texel inside it). Each sample estimates the
    texel-center sum ``sum L * max(0, n . r_center) * dw / pi``, so the only
    noise left is the mismatch between RGB and luminance; a gray environment
    renders without variance. Pixels whose visible hemisphere is black fall
    back to cosine-only importance.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = _as_rng(rng)
    data = _env_data(env)
    h, w = data.shape[:2]
    normals = np.ascontiguousarray(np.asarray(normals, dtype=np.float64).reshape(-1, 3))
    k, trig, dw, (tw_area, top_area) = _diffuse_tables(h, w)
    uniforms = rng.random((normals.shape[0], samples, 2))
    uniforms[..., 0].sort(axis=1)
    lum = luminance(data)
    tw_lum, top_lum = _cell_table(lum * dw, k)
    idx, wt = _diffuse_kernel(normals, tw_lum, tw_area, top_lum, top_area, *trig, lum.ravel(), uniforms, w)
    return RenderPlan(idx, wt, (h, w))


def render_diffuse(env, normals, samples: int = DEFAULT_SAMPLES, rng_seed=0) -> np.ndarray:
    """Albedo-1 Lambertian radiance, normalized so a constant env ``c`` gives ``c``."""
    data = _env_data(env)
    n, lead = _flat(normals)
    plan = diffuse_plan(data, n, samples, rng_seed)
    return plan.apply(data).reshape(*lead, 3)


# ---------------------------------------------------------------------------
# Glossy / matte (forward only)
# ---------------------------------------------------------------------------

def _basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.where(np.abs(axis[:, 1:2]) < 0.9, np.array([[0.0, 1.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
    t = np.cross(helper, axis)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(axis, t)
    return t, b


def lobe_plan(normals, view_dirs, exponent: float, env_shape: tuple[int, int],
              samples: int = DEFAULT_SAMPLES, rng=None) -> RenderPlan:
    """Normalized cosine-power lobe around the mirror direction.

    Samples follow the lobe exactly, so each sample carries weight ``1/S``
    and a constant environment is reproduced exactly.
    """
    rng = _as_rng(rng)
    h, w = env_shape
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(view_dirs, dtype=np.float64).reshape(-1, 3)
    r = reflect(v, n)
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    t, b = _basis(r)
    n_pix = n.shape[0]
    xi1 = rng.random((n_pix, samples))
    xi2 = rng.random((n_pix, samples))
    cos_a = np.power(xi1, 1.0 / (exponent + 1.0))
    sin_a = np.sqrt(np.maximum(0.0, 1.0 - cos_a**2))
    phi = 2.0 * np.pi * xi2
    d = (sin_a * np.cos(phi))[..., None] * t[:, None] + (sin_a * np.sin(phi))[..., None] * b[:, None] \
        + cos_a[..., None] * r[:, None]
    u, vv = dir_to_pixel(d, w, h)
    idx, wt = bilinear_taps(u, vv, w, h)
    return RenderPlan(idx.reshape(n_pix, -1), wt.reshape(n_pix, -1) / samples, (h, w))


def render_eval_material(env, normals, view_dirs, material: Material | str,
                         samples: int = DEFAULT_SAMPLES, seed=0) -> np.ndarray:
    material = Material.parse(material)
    if material.kind not in ("glossy", "matte"):
        raise ValueError("render_eval_material handles glossy and matte only")
    data = _env_data(env)
    n, lead = _flat(normals)
    v, _ = _flat(view_dirs)
    plan = lobe_plan(n, v, material.lobe_exponent, data.shape[:2], samples, seed)
    return plan.apply(data).reshape(*lead, 3)


def make_plan(env, normals, view_dirs, material: Material | str,
              samples: int = DEFAULT_SAMPLES, rng=None) -> RenderPlan:
    """Plan for any material over flattened ``(N, 3)`` geometry."""
    material = Material.parse(material)
    data = _env_data(env)
    if material.kind == "mirror":
        return mirror_plan(normals, view_dirs, data.shape[:2])
    if material.kind == "diffuse":
        return diffuse_plan(data, normals, samples, rng)
    return lobe_plan(normals, view_dirs, material.lobe_exponent, data.shape[:2], samples, rng)


def render_sphere(env, crop: SphereCrop, material: Material | str,
                  samples: int = DEFAULT_SAMPLES, seed=0) -> SphereImage:
    """Linear-radiance image of a sphere crop; zero outside the footprint."""
    m = crop.mask
    plan = make_plan(env, crop.normals[m], crop.view_dirs[m], material, samples, seed)
    pixels = np.zeros(m.shape + (3,))
    pixels[m] = plan.apply(env)
    return SphereImage(pixels, m.copy(), crop.normals, crop.positions)


# ---------------------------------------------------------------------------
# Differentiable chain: pyramid -> 2^x -> render -> exposure -> sRGB
# ---------------------------------------------------------------------------

@dataclass
class ProbeTape:
    """Forward intermediates needed by :func:`grad_render`."""

    plan: RenderPlan
    env: np.ndarray  # (H, W, 3) linear radiance
    exposed: np.ndarray  # (N, 3) linear radiance after exposure
    ev: float
    clip: bool


def env_from_pyramid(pyr: LaplacianPyramid) -> np.ndarray:
    return np.exp2(compose_log2(pyr))


def render_probe(pyr: LaplacianPyramid, normals, view_dirs, material: Material | str, ev: float,
                 samples: int = DEFAULT_SAMPLES, rng=None, plan: RenderPlan | None = None,
                 env: np.ndarray | None = None, clip: bool = False) -> tuple[np.ndarray, ProbeTape]:
    """Exposed, sRGB-encoded render of flattened sphere pixels.

    Returns ``(srgb, tape)``. ``plan`` may be passed to hold the sampling
    fixed, ``env`` to reuse an already composed map.
    """
    if env is None:
        env = env_from_pyramid(pyr)
    if plan is None:
        plan = make_plan(env, normals, view_dirs, material, samples, rng)
    exposed = apply_exposure(plan.apply(env), ev)
    return srgb_encode(exposed, clip=clip), ProbeTape(plan, env, exposed, ev, clip)


def render_probe_env_grad(adjoint, tape: ProbeTape) -> np.ndarray:
    """Gradient with respect to the linear env texels."""
    adjoint = np.asarray(adjoint, dtype=np.float64)
    if not np.all(np.isfinite(adjoint)):
        raise ValueError("adjoint contains non-finite values")
    g = adjoint * srgb_encode_grad(tape.exposed)
    if tape.clip:
        g = np.where(srgb_encode(tape.exposed, clip=False) < 1.0, g, 0.0)
    return tape.plan.adjoint(apply_exposure(g, tape.ev))


def grad_render(pyr: LaplacianPyramid, adjoint, tape: ProbeTape) -> list[np.ndarray]:
    """Pull an sRGB-space pixel adjoint back to the pyramid coefficients."""
    g_env = render_probe_env_grad(adjoint, tape)
    return compose_log2_adjoint(g_env * tape.env * math.log(2.0), pyr)
