"""Command-line entry point: ``probefuse {gen-maps,synth,fuse,render,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import set_threads
from .color import DEFAULT_EVS, apply_exposure, srgb_encode
from .fusion import FusionError, fuse
from .geom_maps import CameraModel, SphereSpec, condition_maps, sphere_crop
from .io import (
    ManifestError,
    ProbeManifest,
    RunConfig,
    read_env,
    read_exr,
    read_png,
    write_exr,
    write_observation_set,
    write_png,
)
from .metrics import evaluate
from .render import Material, render_sphere
from .synth import SCENARIOS, AnalyticEnv, DiskLight, SequenceScript, direction_from_angles, gen_observations

log = logging.getLogger("probefuse")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _size(text: str) -> tuple[int, int]:
    try:
        if "x" in text.lower():
            w, h = (int(v) for v in text.lower().split("x"))
        else:
            w = int(text)
            h = w // 2
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 512x256 or 512, got {text!r}")
    if w <= 0 or h <= 0 or w != 2 * h:
        raise argparse.ArgumentTypeError(f"size must be positive with width = 2 x height, got {text!r}")
    return w, h


def _vec3(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return vals


def _load_scene(path) -> tuple[CameraModel, SphereSpec]:
    """Camera and sphere from ``{"camera": {...}, "sphere": {"center": [...], "radius": r}}``."""
    try:
        data = json.loads(Path(path).read_text())
        cam, sph = data["camera"], data["sphere"]
        camera = CameraModel(int(cam["width"]), int(cam["height"]), math.radians(float(cam["vertical_fov_deg"])))
        return camera, SphereSpec(tuple(sph["center"]), float(sph["radius"]))
    except FileNotFoundError:
        raise
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: scene JSON needs camera.{{width,height,vertical_fov_deg}} and "
                         f"sphere.{{center,radius}} ({exc})") from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_maps(args) -> int:
    camera, sphere = _load_scene(args.scene)
    depth = read_exr(args.depth)[..., 0]
    rgb = read_png(args.rgb) if args.rgb else np.zeros(depth.shape + (3,))
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    maps = condition_maps(rgb[..., :3], depth, camera, sphere)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(maps.rgb_masked, out / "rgb_masked.png")
    write_png(maps.sphere_mask.astype(float), out / "sphere_mask.png")
    write_png(maps.dir_valid.astype(float), out / "dir_valid.png")
    for name in ("depth", "normals", "dir", "dist"):
        write_exr(getattr(maps, name), out / f"{name}.exr")
    log.info("wrote condition maps to %s", out)
    return EXIT_OK


def default_scene(resolution: int = 512):
    """Camera and probe placement used by ``synth``.

    The mirror ball fills most of a square frame, so at 512 px its bilinear
    taps reach over 90% of a 512x256 map. The diffuse ball is pushed back in
    proportion to the resolution and keeps a constant footprint of about 26 px.
    """
    camera = CameraModel(resolution, resolution, math.radians(40.0))
    spheres = {"mirror": SphereSpec((0.0, 0.0, -3.0), 1.0),
               "diffuse": SphereSpec((0.0, 0.0, -8.0 * resolution / 128), 0.6)}
    return camera, spheres


def cmd_synth(args) -> int:
    light = DiskLight(direction_from_angles(math.radians(args.light_elevation), math.radians(args.light_azimuth)),
                      math.radians(args.light_radius), args.light_radiance)
    env = AnalyticEnv(args.ambient, (light,))
    if args.camera < 16:
        raise InputError("--camera must be at least 16 pixels")
    camera, spheres = default_scene(args.camera)
    end = (0.6, 0.0, -3.0) if args.scenario in ("dynamic_sphere", "combination") else None
    script = SequenceScript(args.frames, args.scenario, math.radians(args.azimuth_rate),
                            tuple(args.intensity), end)
    data = gen_observations(env, camera, spheres, evs=args.evs, noise_sigma=args.noise, seed=args.seed,
                            script=script, env_width=args.size[0], samples=args.samples)
    path = write_observation_set(data.observations, args.out, data.gt_envs)
    print(path)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    fusion = cfg.fusion.to_dict()
    overrides = {"iterations_per_frame": args.iters, "learning_rate": args.lr, "temporal_weight": args.lam,
                 "tau": args.tau, "levels": args.levels, "diffuse_samples": args.samples, "seed": args.seed}
    fusion.update({k: v for k, v in overrides.items() if v is not None})
    if args.size is not None:
        fusion["env_width"], fusion["env_height"] = args.size
    if args.no_saturation_mask:
        fusion["use_saturation_mask"] = False
    data = cfg.to_dict()
    data["fusion"] = fusion
    data["output_dir"] = args.out
    return RunConfig.from_dict(data)


def cmd_fuse(args) -> int:
    cfg = _run_config(args)
    manifest = ProbeManifest.load(args.manifest)
    observations = manifest.observations()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = fuse(observations, cfg.fusion)
    except FusionError as exc:
        np.savetxt(out / "loss_trace_failed.csv", exc.loss_trace, delimiter=",")
        raise
    for frame, env in zip(result.frames, result.envs):
        write_exr(env, out / cfg.env_pattern.format(frame=frame))
    with open(out / cfg.loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows((i, repr(float(v))) for i, v in enumerate(result.loss_trace))
    cfg.save(out / "run_config.json")
    log.info("fused %d frame(s) into %s", len(result.envs), out)
    return EXIT_OK


def cmd_render(args) -> int:
    env = read_env(args.env)
    camera = CameraModel(args.width, args.height, math.radians(args.fov))
    sphere = SphereSpec(args.sphere_center, args.sphere_radius)
    crop = sphere_crop(camera, sphere)
    img = render_sphere(env, crop, Material.parse(args.material), args.samples, args.seed)
    linear = apply_exposure(img.pixels, args.ev)
    out = Path(args.out)
    if out.suffix.lower() == ".exr":
        write_exr(linear, out)
    else:
        write_png(srgb_encode(linear) * img.mask[..., None], out, args.bits)
    return EXIT_OK


def _env_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.exr"))
    if not files:
        raise InputError(f"{directory}: no EXR files")
    return files


def cmd_eval(args) -> int:
    pred = _env_files(args.pred)
    gt = _env_files(args.gt)
    if len(pred) != len(gt):
        raise InputError(f"frame count mismatch: {len(pred)} predicted vs {len(gt)} ground-truth maps")
    report = evaluate([read_env(p) for p in pred], [read_env(g) for g in gt], seed=args.seed, samples=args.samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out.with_suffix(".csv"))
    report.to_json(out.with_suffix(".json"))
    for row in report.aggregate():
        print(f"{row['material']:8s} rmse {row['rmse']:.4f} si_rmse {row['si_rmse']:.4f} "
              f"ssim {row['ssim']:.4f} angular {row['angular_error_deg']:.2f} deg")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probefuse", description="HDR environment maps from multi-exposure light probes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-maps", help="conditioning maps for a sphere placed in a depth image")
    g.add_argument("--depth", required=True, help="z-depth EXR (first channel used)")
    g.add_argument("--scene", required=True, help="JSON with camera and sphere")
    g.add_argument("--rgb", help="optional sRGB PNG of the scene")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_maps)

    s = sub.add_parser("synth", help="synthetic observations and ground truth")
    s.add_argument("--scenario", choices=SCENARIOS, default="static")
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian sigma in sRGB units")
    s.add_argument("--size", type=_size, default=(512, 256), help="ground-truth env size WxH")
    s.add_argument("--camera", type=int, default=512, help="square observation camera resolution")
    s.add_argument("--samples", type=int, default=256, help="diffuse samples for ground-truth renders")
    s.add_argument("--evs", type=float, nargs="+", default=list(DEFAULT_EVS))
    s.add_argument("--ambient", type=float, default=0.05)
    s.add_argument("--light-radiance", type=float, default=2.0**10)
    s.add_argument("--light-radius", type=float, default=5.0, help="degrees")
    s.add_argument("--light-elevation", type=float, default=30.0, help="degrees")
    s.add_argument("--light-azimuth", type=float, default=150.0, help="degrees, 0 = camera forward")
    s.add_argument("--azimuth-rate", type=float, default=10.0, help="degrees per frame")
    s.add_argument("--intensity", type=float, nargs="+", default=[1.0], help="light intensity keyframes")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fuse", help="recover per-frame env maps from a probe manifest")
    f.add_argument("manifest")
    f.add_argument("--out", required=True)
    f.add_argument("--config", help="RunConfig JSON; flags override it")
    f.add_argument("--iters", type=int, help="iterations per frame")
    f.add_argument("--lr", type=float)
    f.add_argument("--lambda", dest="lam", type=float, help="temporal weight")
    f.add_argument("--tau", type=float, help="saturation threshold in sRGB units")
    f.add_argument("--levels", type=int)
    f.add_argument("--size", type=_size)
    f.add_argument("--samples", type=int, help="diffuse samples per pixel")
    f.add_argument("--seed", type=int)
    f.add_argument("--no-saturation-mask", action="store_true")
    f.set_defaults(func=cmd_fuse)

    r = sub.add_parser("render", help="render a sphere under an env map")
    r.add_argument("--env", required=True)
    r.add_argument("--material", choices=["mirror", "diffuse", "glossy", "matte"], required=True)
    r.add_argument("--ev", type=float, default=0.0)
    r.add_argument("--out", required=True, help=".png or .exr")
    r.add_argument("--width", type=int, default=128)
    r.add_argument("--height", type=int, default=128)
    r.add_argument("--fov", type=float, default=40.0, help="vertical field of view in degrees")
    r.add_argument("--sphere-center", type=_vec3, default=(0.0, 0.0, -3.0))
    r.add_argument("--sphere-radius", type=float, default=1.0)
    r.add_argument("--samples", type=int, default=64)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--bits", type=int, choices=[8, 16], default=8)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="relighting metrics between two env directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report path prefix (.csv and .json written)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--samples", type=int, default=64)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    set_threads()
    try:
        args = build_parser().parse_args(argv)
    except InputError as exc:
        print(f"probefuse: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FusionError, FloatingPointError) as exc:
        print(f"probefuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ManifestError, ValueError, FileNotFoundError, argparse.ArgumentTypeError) as exc:
        print(f"probefuse: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
