"""EXR/PNG files, probe-set manifests and run configuration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import jsonschema
import numpy as np
import OpenEXR

from .envmap import HdriMap
from .fusion import FusionConfig, ProbeObservation
from .geom_maps import CameraModel, SphereSpec, sphere_crop

MANIFEST_VERSION = "probefuse-manifest/1"


class ManifestError(ValueError):
    """A manifest or config failed validation; the message names the field."""


# ---------------------------------------------------------------------------
# EXR
# ---------------------------------------------------------------------------

def write_exr(image, path, half: bool = False) -> None:
    """Write an ``(H, W, 3)`` (or ``(H, W)``) float image as scanline EXR."""
    data = image.data if isinstance(image, HdriMap) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=-1)
    if data.ndim != 3 or data.shape[-1] not in (3, 4):
        raise ValueError(f"EXR writer expects (H, W, 3|4) data, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write non-finite values to EXR")
    dtype = np.float16 if half else np.float32
    if half and np.abs(data).max(initial=0.0) > np.finfo(np.float16).max:
        raise ValueError("values exceed the half-float range")
    name = "RGB" if data.shape[-1] == 3 else "RGBA"
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with OpenEXR.File(header, {name: np.ascontiguousarray(data.astype(dtype))}) as f:
        f.write(str(path))


def read_exr(path) -> np.ndarray:
    """Read RGB(A) or single-channel EXR data as float64, ``(H, W, C)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"EXR file not found: {path}")
    try:
        with OpenEXR.File(str(path)) as f:
            channels = f.channels()
            for key in ("RGB", "RGBA", "Y", "Z", "R"):
                if key in channels:
                    px = np.asarray(channels[key].pixels, dtype=np.float64)
                    break
            else:
                raise ValueError(f"{path}: no RGB, Y or Z channel (found {', '.join(channels)})")
    except RuntimeError as exc:
        raise ValueError(f"{path}: cannot read EXR ({exc})") from exc
    return px if px.ndim == 3 else px[..., None]


def read_env(path) -> HdriMap:
    data = read_exr(path)
    if data.shape[-1] == 1:
        data = np.repeat(data, 3, axis=-1)
    return HdriMap(data[..., :3])


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def write_png(image, path, bits: int = 8) -> None:
    """Write sRGB values in [0, 1] as an 8- or 16-bit PNG."""
    if bits not in (8, 16):
        raise ValueError(f"PNG bit depth must be 8 or 16, got {bits}")
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("PNG values must lie in [0, 1]")
    scale = 255 if bits == 8 else 65535
    q = np.rint(img * scale).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write PNG {path}")


def read_png(path, bits: int | None = None) -> np.ndarray:
    """Read a PNG as floats in [0, 1]; ``bits`` asserts the stored depth."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"PNG file not found: {path}")
    q = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if q is None:
        raise ValueError(f"{path}: cannot decode PNG")
    depth = {np.dtype(np.uint8): 8, np.dtype(np.uint16): 16}.get(q.dtype)
    if depth is None:
        raise ValueError(f"{path}: unsupported PNG sample type {q.dtype}")
    if bits is not None and bits != depth:
        raise ValueError(f"{path}: expected {bits}-bit PNG, file is {depth}-bit")
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_BGRA2RGB if q.shape[-1] == 4 else cv2.COLOR_BGR2RGB)
    return q.astype(np.float64) / (255.0 if depth == 8 else 65535.0)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "camera", "frames"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "camera": {
            "type": "object",
            "required": ["width", "height", "vertical_fov_deg"],
            "properties": {
                "width": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "vertical_fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
            },
            "additionalProperties": False,
        },
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["index", "observations"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "observations": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["image_path", "material", "ev", "sphere_center", "sphere_radius"],
                            "properties": {
                                "image_path": {"type": "string", "minLength": 1},
                                "material": {"enum": ["mirror", "diffuse"]},
                                "ev": {"type": "number"},
                                "sphere_center": _VEC3,
                                "sphere_radius": {"type": "number", "exclusiveMinimum": 0},
                            },
                            "additionalProperties": False,
                        },
                    },
                },
                "additionalProperties": False,
            },
        },
        "gt_envs": {"type": "array", "items": {"type": "string"}},
    },
    "additionalProperties": False,
}


def _field_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_manifest(data: dict, base_dir=None) -> None:
    """Schema, uniqueness and path checks; raises :class:`ManifestError`."""
    errors = sorted(jsonschema.Draft202012Validator(MANIFEST_SCHEMA).iter_errors(data),
                    key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ManifestError(f"manifest field {_field_path(err)}: {err.message}")
    seen = set()
    indices = set()
    for fi, frame in enumerate(data["frames"]):
        if frame["index"] in indices:
            raise ManifestError(f"manifest field frames.{fi}.index: duplicate frame index {frame['index']}")
        indices.add(frame["index"])
        for oi, o in enumerate(frame["observations"]):
            key = (frame["index"], o["material"], float(o["ev"]))
            if key in seen:
                raise ManifestError(f"manifest field frames.{fi}.observations.{oi}: duplicate "
                                    f"(frame, material, ev) = {key}")
            seen.add(key)
            if base_dir is not None and not (Path(base_dir) / o["image_path"]).is_file():
                raise ManifestError(f"manifest field frames.{fi}.observations.{oi}.image_path: "
                                    f"file not found: {o['image_path']}")
    if base_dir is not None:
        for gi, p in enumerate(data.get("gt_envs", [])):
            if not (Path(base_dir) / p).is_file():
                raise ManifestError(f"manifest field gt_envs.{gi}: file not found: {p}")


@dataclass
class ProbeManifest:
    camera: CameraModel
    frames: list[dict]
    base_dir: Path
    gt_envs: list[str] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "ProbeManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
        validate_manifest(data, path.parent)
        cam = data["camera"]
        camera = CameraModel(cam["width"], cam["height"], math.radians(cam["vertical_fov_deg"]))
        return cls(camera, data["frames"], path.parent, list(data.get("gt_envs", [])))

    def observations(self) -> list[ProbeObservation]:
        """Read every image and attach the sphere geometry it was cropped with."""
        out = []
        for frame in self.frames:
            for o in frame["observations"]:
                sphere = SphereSpec(tuple(o["sphere_center"]), o["sphere_radius"])
                crop = sphere_crop(self.camera, sphere)
                img = read_png(self.base_dir / o["image_path"])
                if img.ndim == 2:
                    img = np.repeat(img[..., None], 3, axis=-1)
                if img.shape[:2] != crop.shape:
                    raise ManifestError(f"{o['image_path']}: image is {img.shape[:2]} but the sphere "
                                        f"crop is {crop.shape}")
                img = img * crop.mask[..., None]
                out.append(ProbeObservation.from_crop(img, o["material"], o["ev"], frame["index"],
                                                      sphere, self.camera, crop))
        return out

    def ground_truth(self) -> list[HdriMap]:
        return [read_env(self.base_dir / p) for p in self.gt_envs]


def write_observation_set(observations, directory, gt_envs=None, bits: int = 16) -> Path:
    """Write observation PNGs (plus optional ground-truth EXRs) and their manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    observations = list(observations)
    if not observations:
        raise ValueError("no observations to write")
    camera = observations[0].camera
    frames: dict[int, list] = {}
    for o in observations:
        if o.camera != camera:
            raise ValueError("all observations must share one camera")
        name = f"obs/f{o.frame:04d}_{o.material.kind}_ev{o.ev:+g}.png"
        write_png(o.image, directory / name, bits)
        frames.setdefault(o.frame, []).append({
            "image_path": name, "material": o.material.kind, "ev": o.ev,
            "sphere_center": list(o.sphere.center), "sphere_radius": o.sphere.radius,
        })
    data = {
        "version": MANIFEST_VERSION,
        "camera": {"width": camera.width, "height": camera.height,
                   "vertical_fov_deg": math.degrees(camera.vertical_fov)},
        "frames": [{"index": k, "observations": v} for k, v in sorted(frames.items())],
    }
    if gt_envs is not None:
        data["gt_envs"] = []
        for t, env in enumerate(gt_envs):
            name = f"gt/env_{t:04d}.exr"
            write_exr(env, directory / name, half=True)
            data["gt_envs"].append(name)
    validate_manifest(data, directory)
    path = directory / "manifest.json"
    path.write_text(json.dumps(data, indent=2))
    return path


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    output_dir: str = "fused"
    env_pattern: str = "env_{frame:04d}.exr"
    loss_csv: str = "loss.csv"

    def to_dict(self) -> dict:
        return {"fusion": self.fusion.to_dict(), "output_dir": self.output_dir,
                "env_pattern": self.env_pattern, "loss_csv": self.loss_csv}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"fusion", "output_dir", "env_pattern", "loss_csv"}
        unknown = set(data) - known
        if unknown:
            raise ManifestError(f"run config field {sorted(unknown)[0]}: unknown field")
        try:
            fusion = FusionConfig.from_dict(data.get("fusion", {}))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"run config field fusion: {exc}") from exc
        kwargs = {k: data[k] for k in ("output_dir", "env_pattern", "loss_csv") if k in data}
        return cls(fusion=fusion, **kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
