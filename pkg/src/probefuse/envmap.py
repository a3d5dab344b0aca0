"""Equirectangular environment maps and their Laplacian-pyramid parameterization.

Convention used across the package (camera frame, y up, right handed):

* row 0 is the zenith (+y), the last row the nadir;
* column ``W/2`` looks down the camera forward axis (-z);
* a normalized coordinate ``(u, v)`` maps to polar angle ``theta = pi * v`` and
  azimuth ``phi = 2 * pi * (u - 0.5)``, giving
  ``d = (sin(theta) sin(phi), cos(theta), -sin(theta) cos(phi))``.

Continuous pixel coordinates are ``u * W`` / ``v * H``; texel ``(i, j)`` has
its center at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

DEFAULT_WIDTH = 512
DEFAULT_HEIGHT = 256
DEFAULT_LEVELS = 8


@dataclass(frozen=True)
class HdriMap:
    """Linear-radiance equirectangular RGB image of shape ``(H, W, 3)``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"HdriMap data must be (H, W, 3), got {data.shape}")
        if data.shape[1] != 2 * data.shape[0]:
            raise ValueError(f"HdriMap width must be twice its height, got {data.shape[1]}x{data.shape[0]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("HdriMap contains non-finite radiance")
        if np.any(data < 0):
            raise ValueError("HdriMap contains negative radiance")
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def constant(cls, value, width: int = DEFAULT_WIDTH, height: int | None = None) -> "HdriMap":
        height = width // 2 if height is None else height
        rgb = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.broadcast_to(rgb, (height, width, 3)).copy())


def pixel_to_dir(u, v) -> np.ndarray:
    """Unit direction for normalized equirect coordinates ``u, v`` in [0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    theta = np.pi * v
    phi = 2.0 * np.pi * (u - 0.5)
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)


def dir_to_pixel(d, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates ``(u, v)`` of direction(s) ``d``.

    ``u`` lies in ``[0, width)`` and ``v`` in ``[0, height]``.
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    theta = np.arccos(np.clip(y, -1.0, 1.0))
    phi = np.arctan2(x, -z)
    u = np.mod(phi / (2.0 * np.pi) + 0.5, 1.0) * width
    # mod can return exactly 1.0 for tiny negative inputs
    u = np.where(u >= width, 0.0, u)
    v = theta / np.pi * height
    return u, v


def texel_directions(width: int, height: int) -> np.ndarray:
    """Directions through texel centers, shape ``(H, W, 3)``."""
    return _texel_directions(width, height).copy()


@lru_cache(maxsize=16)
def _texel_directions(width: int, height: int) -> np.ndarray:
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return pixel_to_dir(uu, vv)


def solid_angle_map(width: int, height: int) -> np.ndarray:
    """Per-texel solid angle in steradians, shape ``(H, W)``.

    Each row is the exact area of its latitude band split into ``width``
    wedges, ``(2 pi / W) (cos(theta_top) - cos(theta_bottom))``, which equals
    ``(2 pi / W)(pi / H) sin(theta_center)`` up to a factor
    ``sinc(pi / 2H)`` and sums to exactly 4 pi.
    """
    return _solid_angle_map(width, height).copy()


@lru_cache(maxsize=16)
def _solid_angle_map(width: int, height: int) -> np.ndarray:
    edges = np.cos(np.pi * np.arange(height + 1) / height)
    band = (2.0 * np.pi / width) * (edges[:-1] - edges[1:])
    return np.repeat(band[:, None], width, axis=1)


def bilinear_taps(u, v, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat texel indices and weights of the four bilinear taps at ``(u, v)``.

    Columns wrap around, rows are clamped. Returns arrays of shape ``(..., 4)``
    whose weights sum to one.
    """
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    c0 = np.mod(x0, width)
    c1 = np.mod(x0 + 1, width)
    r0 = np.clip(y0, 0, height - 1)
    r1 = np.clip(y0 + 1, 0, height - 1)
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, w


def bilinear_sample(env: HdriMap | np.ndarray, u, v) -> np.ndarray:
    """Bilinearly interpolated RGB at continuous pixel coordinates."""
    data = env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)
    h, w = data.shape[:2]
    idx, wt = bilinear_taps(u, v, w, h)
    flat = data.reshape(-1, data.shape[2])
    return np.einsum("...k,...kc->...c", wt, flat[idx])


# ---------------------------------------------------------------------------
# Laplacian pyramid
# ---------------------------------------------------------------------------

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class LaplacianPyramid:
    """Band-pass residuals of a log2-radiance image, finest first.

    ``levels[i]`` has shape ``(ceil(H / 2**i), ceil(W / 2**i), 3)`` and the
    last entry holds the low-pass remainder.
    """

    levels: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        self.levels = [np.asarray(lv, dtype=np.float64) for lv in self.levels]
        expected = level_shapes(self.base_width, self.base_height, len(self.levels))
        for lv, shape in zip(self.levels, expected):
            if lv.shape != (shape[0], shape[1], 3):
                raise ValueError(f"pyramid level has shape {lv.shape}, expected {(shape[0], shape[1], 3)}")

    @property
    def base_width(self) -> int:
        return self.levels[0].shape[1]

    @property
    def base_height(self) -> int:
        return self.levels[0].shape[0]

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @classmethod
    def constant(cls, value: float, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT,
                 levels: int = DEFAULT_LEVELS) -> "LaplacianPyramid":
        """Pyramid composing to the constant map ``value`` (> 0)."""
        out = [np.zeros((h, w, 3)) for h, w in level_shapes(width, height, levels)]
        out[-1][...] = math.log2(value)
        return cls(out)

    def copy(self) -> "LaplacianPyramid":
        return LaplacianPyramid([lv.copy() for lv in self.levels])


def level_shapes(width: int, height: int, levels: int) -> list[tuple[int, int]]:
    """``(height, width)`` of each pyramid level."""
    return [(max(1, -(-height // 2**i)), max(1, -(-width // 2**i))) for i in range(levels)]


@lru_cache(maxsize=64)
def _upsample_matrix(n_in: int, n_out: int, wrap: bool) -> sp.csr_matrix:
    # even outputs (1, 6, 1)/8, odd outputs (4, 4)/8: zero insertion + binomial filter with gain 2
    rows, cols, vals = [], [], []
    for j in range(n_out):
        k = j // 2
        taps = [(k - 1, 0.125), (k, 0.75), (k + 1, 0.125)] if j % 2 == 0 else [(k, 0.5), (k + 1, 0.5)]
        for src, wgt in taps:
            src = src % n_in if wrap else min(max(src, 0), n_in - 1)
            rows.append(j)
            cols.append(src)
            vals.append(wgt)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


@lru_cache(maxsize=64)
def _downsample_matrix(n_in: int, n_out: int, wrap: bool) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k in range(n_out):
        for t, wgt in zip(range(-2, 3), _BINOMIAL):
            src = 2 * k + t
            src = src % n_in if wrap else min(max(src, 0), n_in - 1)
            rows.append(k)
            cols.append(src)
            vals.append(wgt)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _apply_separable(img: np.ndarray, row_op: sp.csr_matrix, col_op: sp.csr_matrix) -> np.ndarray:
    """``row_op @ img @ col_op.T`` applied per channel to an ``(H, W, C)`` image."""
    h, w, c = img.shape
    tmp = row_op @ img.reshape(h, w * c)
    tmp = tmp.reshape(row_op.shape[0], w, c).transpose(1, 0, 2).reshape(w, -1)
    out = col_op @ tmp
    return np.ascontiguousarray(out.reshape(col_op.shape[0], row_op.shape[0], c).transpose(1, 0, 2))


def upsample(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Expand ``img`` to ``shape`` (height, width) with the binomial filter."""
    h, w = img.shape[:2]
    return _apply_separable(img, _upsample_matrix(h, shape[0], False), _upsample_matrix(w, shape[1], True))


def upsample_adjoint(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = grad.shape[:2]
    return _apply_separable(grad, _upsample_matrix(shape[0], h, False).T.tocsr(),
                            _upsample_matrix(shape[1], w, True).T.tocsr())


def downsample(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[:2]
    return _apply_separable(img, _downsample_matrix(h, shape[0], False), _downsample_matrix(w, shape[1], True))


def compose_log2(pyr: LaplacianPyramid) -> np.ndarray:
    """Reconstruct the log2-radiance image from the pyramid."""
    img = pyr.levels[-1]
    for lv in reversed(pyr.levels[:-1]):
        img = upsample(img, lv.shape[:2]) + lv
    return img


def compose_log2_adjoint(grad: np.ndarray, pyr: LaplacianPyramid) -> list[np.ndarray]:
    """Pull a gradient on the log2 image back onto every pyramid level."""
    out = [grad]
    g = grad
    for lv in pyr.levels[1:]:
        g = upsample_adjoint(g, lv.shape[:2])
        out.append(g)
    return out


def pyramid_compose(pyr: LaplacianPyramid) -> HdriMap:
    """Linear-radiance map ``2 ** reconstruction``; strictly positive."""
    for lv in pyr.levels:
        if not np.all(np.isfinite(lv)):
            raise ValueError("pyramid has non-finite coefficients")
    return HdriMap(np.exp2(compose_log2(pyr)))


def pyramid_decompose(env: HdriMap | np.ndarray, levels: int = DEFAULT_LEVELS) -> LaplacianPyramid:
    """Laplacian analysis of ``log2(env)``; inverted exactly by :func:`pyramid_compose`."""
    data = env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)
    if np.any(data <= 0):
        raise ValueError("pyramid_decompose needs strictly positive radiance (log2 undefined)")
    h, w = data.shape[:2]
    shapes = level_shapes(w, h, levels)
    gauss = np.log2(data)
    out = []
    for shape in shapes[1:]:
        coarse = downsample(gauss, shape)
        out.append(gauss - upsample(coarse, gauss.shape[:2]))
        gauss = coarse
    out.append(gauss)
    return LaplacianPyramid(out)
