"""Multi-exposure light-probe fusion into per-frame HDR environment maps.

Each frame's environment is parameterized by a Laplacian pyramid of log2
radiance. Every step draws one observation (frame, material, exposure) at
random, renders it from the current estimate, and takes an Adam step on the
masked squared error plus an L1 penalty tying the render to the same probe
rendered from the neighboring frames' estimates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .envmap import DEFAULT_HEIGHT, DEFAULT_LEVELS, DEFAULT_WIDTH, HdriMap, LaplacianPyramid, compose_log2
from .geom_maps import CameraModel, SphereCrop, SphereSpec
from .render import DEFAULT_SAMPLES, Material, grad_render, make_plan, render_probe

log = logging.getLogger(__name__)

INIT_RADIANCE = 0.5
DIVERGENCE_LOSS = 1e6


class FusionError(RuntimeError):
    """Optimization produced a non-finite or exploding loss."""

    def __init__(self, message: str, loss_trace=None, iteration: int | None = None):
        super().__init__(message)
        self.loss_trace = np.asarray(loss_trace if loss_trace is not None else [], dtype=np.float64)
        self.iteration = iteration


@dataclass
class ProbeObservation:
    """One LDR sphere crop with the geometry needed to re-render it."""

    image: np.ndarray  # (h, w, 3) sRGB in [0, 1]
    material: Material
    ev: float
    frame: int
    sphere: SphereSpec
    camera: CameraModel
    mask: np.ndarray  # (h, w) bool
    normals: np.ndarray  # (h, w, 3)
    view_dirs: np.ndarray  # (h, w, 3)

    def __post_init__(self) -> None:
        self.material = Material.parse(self.material)
        if self.material.kind not in ("mirror", "diffuse"):
            raise ValueError(f"observations must be mirror or diffuse, got {self.material.kind}")
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.image.shape != self.mask.shape + (3,):
            raise ValueError(f"image shape {self.image.shape} does not match mask {self.mask.shape}")
        if self.normals.shape != self.image.shape or self.view_dirs.shape != self.image.shape:
            raise ValueError("normals and view_dirs must be aligned with the image")
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("observation image must lie in [0, 1]")
        if not self.mask.any():
            raise ValueError("observation mask is empty")
        self.ev = float(self.ev)
        self.frame = int(self.frame)

    @classmethod
    def from_crop(cls, image, material, ev, frame, sphere: SphereSpec, camera: CameraModel,
                  crop: SphereCrop) -> "ProbeObservation":
        return cls(image, material, ev, frame, sphere, camera, crop.mask, crop.normals, crop.view_dirs)

    @property
    def key(self) -> tuple[int, str, float]:
        return self.frame, self.material.kind, self.ev

    @property
    def pixels(self) -> np.ndarray:
        return self.image[self.mask]


@dataclass(frozen=True)
class FusionConfig:
    iterations_per_frame: int = 1000
    learning_rate: float = 5e-3
    temporal_weight: float = 0.1
    tau: float = 0.98
    levels: int = DEFAULT_LEVELS
    env_width: int = DEFAULT_WIDTH
    env_height: int = DEFAULT_HEIGHT
    diffuse_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    use_saturation_mask: bool = True

    def __post_init__(self) -> None:
        for name in ("iterations_per_frame", "levels", "env_width", "env_height", "diffuse_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.temporal_weight >= 0:
            raise ValueError("temporal_weight must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.env_width != 2 * self.env_height:
            raise ValueError("env_width must be twice env_height")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class FusionResult:
    envs: list[HdriMap]
    loss_trace: np.ndarray
    config: FusionConfig
    frames: list[int]
    pyramids: list[LaplacianPyramid] = field(repr=False, default_factory=list)


@dataclass
class LossTerms:
    data: float
    temporal: float

    @property
    def total(self) -> float:
        return self.data + self.temporal


def saturation_mask(pred, obs, tau: float) -> np.ndarray:
    """1 where a pixel/channel constrains the fit, 0 where both images exceed ``tau``."""
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    return (~((pred > tau) & (obs > tau))).astype(np.float64)


class Adam:
    """Adam over a list of parameter groups, each with its own step count.

    Groups that receive no gradient in a step are left untouched (their
    moments do not decay), so frames are only updated when observed.
    """

    def __init__(self, groups: list[list[np.ndarray]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [[np.zeros_like(p) for p in g] for g in groups]
        self.v = [[np.zeros_like(p) for p in g] for g in groups]
        self.t = [0] * len(groups)

    def step(self, grads: dict[int, list[np.ndarray]]) -> None:
        for gi, grad in grads.items():
            self.t[gi] += 1
            t = self.t[gi]
            c1 = 1.0 - self.b1**t
            c2 = 1.0 - self.b2**t
            for p, g, m, v in zip(self.groups[gi], grad, self.m[gi], self.v[gi]):
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _neighbors(index: int, count: int) -> list[int]:
    return [j for j in (index - 1, index + 1) if 0 <= j < count]


def loss_step(pyramids: list[LaplacianPyramid], obs: ProbeObservation, index: int,
              config: FusionConfig, rng=None, envs: dict | None = None):
    """Loss and pyramid gradients for one observation of frame ``pyramids[index]``.

    Neighbor frames are rendered with the same sampling plan, so their
    difference to the current frame carries no independent Monte Carlo noise.
    Returns ``(LossTerms, {frame_index: level_gradients})``.
    """
    envs = {} if envs is None else envs
    for j in [index] + _neighbors(index, len(pyramids)):
        if j not in envs:
            with np.errstate(over="ignore"):
                envs[j] = np.exp2(compose_log2(pyramids[j]))
    m = obs.mask
    normals, view_dirs, target = obs.normals[m], obs.view_dirs[m], obs.image[m]
    plan = make_plan(envs[index], normals, view_dirs, obs.material, config.diffuse_samples, rng)
    pred, tape = render_probe(pyramids[index], normals, view_dirs, obs.material, obs.ev,
                              plan=plan, env=envs[index])
    if not np.all(np.isfinite(pred)):
        raise FusionError(f"non-finite render for frame {obs.frame}, {obs.material.kind}, ev {obs.ev:g}")
    mask = saturation_mask(pred, target, config.tau) if config.use_saturation_mask else np.ones_like(pred)
    norm = 1.0 / pred.size

    resid = pred - target
    data = float(np.sum(mask * resid * resid) * norm)
    adj = {index: 2.0 * mask * resid * norm}
    tapes = {index: tape}
    temporal = 0.0
    half = 0.5 * config.temporal_weight
    if half > 0:
        for j in _neighbors(index, len(pyramids)):
            other, tapes[j] = render_probe(pyramids[j], normals, view_dirs, obs.material, obs.ev,
                                           plan=plan, env=envs[j])
            diff = pred - other
            temporal += half * float(np.sum(mask * np.abs(diff)) * norm)
            sign = half * mask * np.sign(diff) * norm
            adj[index] = adj[index] + sign
            adj[j] = -sign
    grads = {j: grad_render(pyramids[j], adj[j], tapes[j]) for j in adj}
    return LossTerms(data, temporal), grads


def _check_observations(observations) -> tuple[list[ProbeObservation], list[int]]:
    obs = list(observations)
    if not obs:
        raise ValueError("fusion needs at least one observation")
    keys = [o.key for o in obs]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (frame, material, ev) observation")
    return obs, sorted({o.frame for o in obs})


def fuse(observations, config: FusionConfig | None = None, callback=None) -> FusionResult:
    """Recover one environment map per observed frame.

    ``callback(step, loss_terms)`` is invoked after every step if given.
    Raises :class:`FusionError` when the loss becomes non-finite or exceeds
    ``DIVERGENCE_LOSS``.
    """
    config = config or FusionConfig()
    obs, frames = _check_observations(observations)
    slot = {f: i for i, f in enumerate(frames)}
    pyramids = [LaplacianPyramid.constant(INIT_RADIANCE, config.env_width, config.env_height, config.levels)
                for _ in frames]
    adam = Adam([p.levels for p in pyramids], config.learning_rate)
    rng = np.random.default_rng(config.seed)
    steps = config.iterations_per_frame * len(frames)
    trace = np.empty(steps)
    for step in range(steps):
        o = obs[rng.integers(len(obs))]
        try:
            terms, grads = loss_step(pyramids, o, slot[o.frame], config, rng)
        except FusionError as exc:
            raise FusionError(f"step {step}: {exc}", trace[:step], step) from exc
        loss = terms.total
        trace[step] = loss
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise FusionError(f"loss diverged at step {step}: {loss}", trace[: step + 1], step)
        adam.step(grads)
        if callback is not None:
            callback(step, terms)
        if step % 1000 == 0:
            log.debug("step %d loss %.3e", step, loss)
    envs = [HdriMap(np.exp2(compose_log2(p))) for p in pyramids]
    return FusionResult(envs, trace, config, frames, pyramids)


def frame_data_loss(result: FusionResult, observations, seed: int = 0) -> np.ndarray:
    """Mean masked data loss of every observation, averaged per frame of ``result``."""
    config = replace(result.config, temporal_weight=0.0)
    slot = {f: i for i, f in enumerate(result.frames)}
    rng = np.random.default_rng(seed)
    envs = {i: e.data for i, e in enumerate(result.envs)}
    totals = np.zeros(len(result.frames))
    counts = np.zeros(len(result.frames))
    for o in observations:
        i = slot[o.frame]
        terms, _ = loss_step(result.pyramids, o, i, config, rng, envs)
        totals[i] += terms.data
        counts[i] += 1
    return totals / np.maximum(counts, 1)


def with_overrides(config: FusionConfig, **overrides) -> FusionConfig:
    """Copy of ``config`` with the non-``None`` overrides applied."""
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
