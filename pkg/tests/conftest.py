from __future__ import annotations

import math
import time

import numpy as np
import pytest

from probefuse.cli import default_scene
from probefuse.fusion import FusionConfig, fuse
from probefuse.geom_maps import CameraModel, SphereSpec, sphere_crop
from probefuse.synth import AnalyticEnv, DiskLight, direction_from_angles, gen_observations

# ambient 0.05 plus one 5 degree disk of radiance 2^10, up and behind the camera's left
HDR_LIGHT = DiskLight(direction_from_angles(math.radians(30.0), math.radians(150.0)), math.radians(5.0), 2.0**10)
HDR_ENV = AnalyticEnv(0.05, (HDR_LIGHT,))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_crop():
    """A 24x24-pixel sphere seen straight on, enough for cheap render tests."""
    camera = CameraModel(32, 32, math.radians(40.0))
    return sphere_crop(camera, SphereSpec((0.0, 0.0, -3.0), 1.0))


def random_unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def hdr_dataset():
    """Noiseless mirror and diffuse brackets of the HDR scene seen by the default CLI camera."""
    camera, spheres = default_scene()
    return gen_observations(HDR_ENV, camera, spheres)


@pytest.fixture(scope="session")
def hdr_fused(hdr_dataset):
    """Default-configuration fusion of ``hdr_dataset`` and its wall time in seconds."""
    start = time.perf_counter()
    result = fuse(hdr_dataset.observations, FusionConfig())
    return result, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
