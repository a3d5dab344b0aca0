"""Analytic ground-truth lighting and synthetic probe observations.

An :class:`AnalyticEnv` is an ambient term plus cone-shaped disk lights and an
optional vertical sky gradient. It can be rasterized to an equirectangular
map, rotated about the vertical axis and animated over a sequence, and then
rendered onto mirror and diffuse spheres at a set of exposures to produce LDR
observations together with the ground-truth maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .color import DEFAULT_EVS, apply_exposure, srgb_encode
from .envmap import DEFAULT_HEIGHT, DEFAULT_WIDTH, HdriMap, texel_directions
from .fusion import ProbeObservation
from .geom_maps import CameraModel, SphereSpec, sphere_crop
from .render import Material, render_sphere

SCENARIOS = ("static", "dynamic_sphere", "dynamic_camera", "dynamic_lighting", "combination")
GT_SAMPLES = 256
# sub-texel grid used to estimate disk coverage of boundary texels
_SUPERSAMPLE = 8


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError("direction must be non-zero")
    return v / n


def rotate_direction(d, angle: float) -> np.ndarray:
    """Rotate directions about +y so that their azimuth grows by ``angle``.

    Matches :func:`rotate_azimuth`: a map rolled by ``angle`` shows a light at
    ``rotate_direction(d, angle)``.
    """
    d = np.asarray(d, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([c * x - s * z, y, s * x + c * z], axis=-1)


def direction_from_angles(elevation: float, azimuth: float) -> np.ndarray:
    """Unit vector from elevation above the horizon and azimuth (0 = camera forward, -z)."""
    ce = math.cos(elevation)
    return np.array([ce * math.sin(azimuth), math.sin(elevation), -ce * math.cos(azimuth)])


@dataclass(frozen=True)
class DiskLight:
    direction: tuple[float, float, float]
    angular_radius: float  # radians
    radiance: tuple[float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", tuple(_unit(self.direction)))
        rad = np.broadcast_to(np.asarray(self.radiance, dtype=np.float64), (3,))
        if not np.all(np.isfinite(rad)) or rad.min() < 0:
            raise ValueError("light radiance must be finite and non-negative")
        object.__setattr__(self, "radiance", tuple(float(x) for x in rad))
        if not 0.0 < self.angular_radius < math.pi:
            raise ValueError("angular_radius must be in (0, pi)")

    @property
    def solid_angle(self) -> float:
        return 2.0 * math.pi * (1.0 - math.cos(self.angular_radius))


@dataclass(frozen=True)
class AnalyticEnv:
    ambient: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lights: tuple[DiskLight, ...] = ()
    # linear RGB added at the zenith and the nadir, blended linearly in polar angle
    sky_top: tuple[float, float, float] | None = None
    sky_bottom: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        amb = np.broadcast_to(np.asarray(self.ambient, dtype=np.float64), (3,))
        if not np.all(np.isfinite(amb)) or amb.min() < 0:
            raise ValueError("ambient must be finite and non-negative")
        object.__setattr__(self, "ambient", tuple(float(x) for x in amb))
        object.__setattr__(self, "lights", tuple(self.lights))
        for name in ("sky_top", "sky_bottom"):
            val = getattr(self, name)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=np.float64), (3,))
                if not np.all(np.isfinite(val)) or val.min() < 0:
                    raise ValueError(f"{name} must be finite and non-negative")
                object.__setattr__(self, name, tuple(float(x) for x in val))

    def rotated(self, angle: float) -> "AnalyticEnv":
        lights = tuple(replace(l, direction=tuple(rotate_direction(l.direction, angle))) for l in self.lights)
        return replace(self, lights=lights)

    def scaled(self, factor: float) -> "AnalyticEnv":
        """Scale every light's radiance (ambient and sky unchanged)."""
        lights = tuple(replace(l, radiance=tuple(factor * np.asarray(l.radiance))) for l in self.lights)
        return replace(self, lights=lights)

    def analytic_flux(self) -> np.ndarray:
        """``integral L dw`` of the lights alone, per channel."""
        out = np.zeros(3)
        for l in self.lights:
            out += np.asarray(l.radiance) * l.solid_angle
        return out


def _disk_coverage(light: DiskLight, width: int, height: int) -> np.ndarray:
    """Fraction of each texel's solid angle inside the light cone, ``(H, W)``."""
    axis = np.asarray(light.direction)
    cos_r = math.cos(light.angular_radius)
    dirs = texel_directions(width, height)
    # texel half-diagonal bounds the distance from center to any point of the texel
    slack = math.pi / height * math.sqrt(2.0) + 1e-9
    ang = np.arccos(np.clip(dirs @ axis, -1.0, 1.0))
    cover = (ang <= light.angular_radius - slack).astype(np.float64)
    rows, cols = np.nonzero(np.abs(ang - light.angular_radius) < slack)
    if rows.size:
        s = _SUPERSAMPLE
        k = (np.arange(s) + 0.5) / s
        # uniform in solid angle: cos(theta) linear inside the texel band
        cos_top = np.cos(np.pi * rows / height)[:, None, None]
        cos_bot = np.cos(np.pi * (rows + 1) / height)[:, None, None]
        cos_t = cos_top + k[None, :, None] * (cos_bot - cos_top)
        phi = 2.0 * np.pi * ((cols[:, None, None] + k[None, None, :]) / width - 0.5)
        sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
        d = np.stack(np.broadcast_arrays(sin_t * np.sin(phi), cos_t, -sin_t * np.cos(phi)), axis=-1)
        cover[rows, cols] = np.mean(d @ axis >= cos_r, axis=(1, 2))
    return cover


def bake(env: AnalyticEnv, width: int = DEFAULT_WIDTH, height: int | None = None) -> HdriMap:
    """Rasterize an analytic environment into an equirectangular map."""
    height = width // 2 if height is None else height
    data = np.broadcast_to(np.asarray(env.ambient), (height, width, 3)).copy()
    if env.sky_top is not None or env.sky_bottom is not None:
        top = np.asarray(env.sky_top if env.sky_top is not None else (0.0, 0.0, 0.0))
        bot = np.asarray(env.sky_bottom if env.sky_bottom is not None else (0.0, 0.0, 0.0))
        v = ((np.arange(height) + 0.5) / height)[:, None, None]
        data += (1.0 - v) * top + v * bot
    for light in env.lights:
        data += _disk_coverage(light, width, height)[..., None] * np.asarray(light.radiance)
    return HdriMap(data)


def rotate_azimuth(env: HdriMap | np.ndarray, angle: float) -> HdriMap:
    """Roll the map horizontally so every direction's azimuth grows by ``angle``.

    Fractional shifts interpolate linearly between the two neighboring integer
    rolls, which keeps each row's sum, and hence the total flux, unchanged.
    """
    data = env.data if isinstance(env, HdriMap) else np.asarray(env, dtype=np.float64)
    w = data.shape[1]
    shift = angle / (2.0 * math.pi) * w
    base = math.floor(shift)
    frac = shift - base
    # snap tiny residues so integer shifts are exact rolls
    if abs(frac) < 1e-9:
        frac = 0.0
    elif abs(1.0 - frac) < 1e-9:
        base, frac = base + 1, 0.0
    out = np.roll(data, base % w, axis=1)
    if frac:
        out = (1.0 - frac) * out + frac * np.roll(out, 1, axis=1)
    return HdriMap(out)


@dataclass(frozen=True)
class SequenceScript:
    """How lighting and probe placement evolve over a sequence.

    ``static`` keeps everything fixed. ``dynamic_lighting`` turns the
    environment by ``azimuth_rate`` per frame and interpolates the light
    intensity keyframes. ``dynamic_camera`` models a camera panning around a
    fixed probe, which turns the environment the other way in the camera
    frame. ``dynamic_sphere`` moves the probe linearly from its start center
    to ``sphere_end``. ``combination`` applies all of these together.
    """

    frames: int
    scenario: str = "static"
    azimuth_rate: float = 0.0  # radians per frame
    intensity_keyframes: tuple[float, ...] = (1.0,)
    sphere_end: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.frames < 1:
            raise ValueError("a sequence needs at least one frame")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {', '.join(SCENARIOS)}")
        if not self.intensity_keyframes or min(self.intensity_keyframes) < 0:
            raise ValueError("intensity keyframes must be non-empty and non-negative")
        object.__setattr__(self, "intensity_keyframes", tuple(float(x) for x in self.intensity_keyframes))

    def _moves_lighting(self) -> bool:
        return self.scenario in ("dynamic_lighting", "combination")

    def azimuth(self, t: int) -> float:
        """Camera-frame azimuth offset of the environment at frame ``t``."""
        light = self.azimuth_rate * t if self._moves_lighting() else 0.0
        pan = 0.0
        if self.scenario in ("dynamic_camera", "combination"):
            # in the combined scenario the camera pans at half the lighting rate
            pan = self.azimuth_rate * t * (0.5 if self.scenario == "combination" else 1.0)
        return light - pan

    def intensity(self, t: int) -> float:
        keys = self.intensity_keyframes
        if not self._moves_lighting():
            return 1.0
        if len(keys) == 1 or self.frames == 1:
            return keys[0]
        return float(np.interp(t, np.linspace(0.0, self.frames - 1, len(keys)), keys))

    def frame_env(self, env: AnalyticEnv, t: int) -> AnalyticEnv:
        return env.rotated(self.azimuth(t)).scaled(self.intensity(t))

    def frame_sphere(self, sphere: SphereSpec, t: int) -> SphereSpec:
        if self.scenario not in ("dynamic_sphere", "combination") or self.sphere_end is None:
            return sphere
        a = t / (self.frames - 1) if self.frames > 1 else 0.0
        c = (1.0 - a) * np.asarray(sphere.center) + a * np.asarray(self.sphere_end)
        return SphereSpec(tuple(c), sphere.radius)


@dataclass
class SyntheticSet:
    observations: list[ProbeObservation]
    gt_envs: list[HdriMap]
    gt_analytic: list[AnalyticEnv] = field(default_factory=list)


def _material_spheres(spheres, materials) -> dict[str, SphereSpec]:
    if isinstance(spheres, SphereSpec):
        return {m: spheres for m in materials}
    out = {Material.parse(k).kind: v for k, v in dict(spheres).items()}
    missing = [m for m in materials if m not in out]
    if missing:
        raise ValueError(f"no sphere given for material(s) {', '.join(missing)}")
    return out


def gen_observations(source: AnalyticEnv | HdriMap, camera: CameraModel, spheres,
                     evs=DEFAULT_EVS, materials=("mirror", "diffuse"), noise_sigma: float = 0.0,
                     seed: int = 0, script: SequenceScript | None = None,
                     env_width: int = DEFAULT_WIDTH, samples: int = GT_SAMPLES) -> SyntheticSet:
    """Render LDR bracket observations of mirror/diffuse probes.

    ``spheres`` is one :class:`SphereSpec` for all materials or a mapping from
    material name to sphere. Each render is exposed, perturbed by Gaussian
    noise of std ``noise_sigma`` in sRGB units inside the sphere mask, and
    clipped to [0, 1]. ``script`` animates an analytic source over frames;
    an :class:`HdriMap` source can only be rotated.
    """
    materials = tuple(Material.parse(m).kind for m in materials)
    per_material = _material_spheres(spheres, materials)
    script = script or SequenceScript(1)
    rng = np.random.default_rng(seed)
    obs, gts, analytic = [], [], []
    for t in range(script.frames):
        if isinstance(source, AnalyticEnv):
            frame_env = script.frame_env(source, t)
            analytic.append(frame_env)
            gt = bake(frame_env, env_width)
        else:
            gt = rotate_azimuth(source, script.azimuth(t)) if script.azimuth(t) else source
            gt = HdriMap(gt.data * script.intensity(t))
        gts.append(gt)
        for kind in materials:
            sphere = script.frame_sphere(per_material[kind], t)
            crop = sphere_crop(camera, sphere)
            linear = render_sphere(gt, crop, kind, samples, seed=int(rng.integers(2**31))).pixels
            for ev in evs:
                img = srgb_encode(apply_exposure(linear, ev))
                if noise_sigma > 0:
                    img = img + noise_sigma * rng.standard_normal(img.shape) * crop.mask[..., None]
                img = np.clip(img, 0.0, 1.0) * crop.mask[..., None]
                obs.append(ProbeObservation.from_crop(img, kind, ev, t, sphere, camera, crop))
    return SyntheticSet(obs, gts, analytic)
