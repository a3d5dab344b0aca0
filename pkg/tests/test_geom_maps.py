from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probefuse.geom_maps import (
    CameraModel,
    SphereSpec,
    animate,
    condition_maps,
    direction_map,
    distance_map,
    footprint_mask,
    log_normalize,
    project,
    radius_for_angle,
    reflect,
    sample_depth_factor,
    sample_placement,
    scene_points,
    sphere_crop,
    sphere_normals,
    sphere_scene_depth,
    unproject,
    world_radius,
)

# 4x4 pinhole with a 90 degree field of view: focal length 2 px, principal point (2, 2)
CAM4 = CameraModel(4, 4, math.radians(90.0))


def angle(a, b):
    c = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(c, -1, 1))


class TestCamera:
    def test_focal(self):
        assert CAM4.focal == pytest.approx(2.0)

    def test_principal_point_forward(self):
        np.testing.assert_allclose(unproject(CAM4, (2.0, 2.0), 2.0), [0, 0, -2], atol=1e-15)

    def test_top_center_is_45_degrees_up(self):
        p = unproject(CAM4, (2.0, 0.0), 1.0)
        np.testing.assert_allclose(p, [0, 1, -1], atol=1e-15)
        assert math.degrees(math.atan2(p[1], -p[2])) == pytest.approx(45.0)

    def test_hand_computed_pixel(self):
        # pixel (row 0, col 0) center (0.5, 0.5): ray (-0.75, 0.75, -1)
        pts = scene_points(CAM4, np.full((4, 4), 4.0))
        np.testing.assert_allclose(pts[0, 0], [-3.0, 3.0, -4.0])

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 64), st.floats(0, 48), st.floats(0.1, 100))
    def test_project_unproject(self, x, y, depth):
        cam = CameraModel(64, 48, math.radians(50))
        np.testing.assert_allclose(project(cam, unproject(cam, (x, y), depth)), [x, y], atol=1e-9)

    def test_rejects_bad_fov(self):
        with pytest.raises(ValueError):
            CameraModel(4, 4, math.pi)


class TestDirectionAndDistance:
    # tiny sphere far from pixel (0, 0)'s scene point (-3, 3, -4)
    SPHERE = SphereSpec((1.0, 0.0, -4.0), 0.1)

    def test_off_sphere_direction(self):
        depth = np.full((4, 4), 4.0)
        dirs, valid = direction_map(CAM4, depth, self.SPHERE)
        # (p - c) = (-4, 3, 0), |p - c| = 5
        np.testing.assert_allclose(dirs[0, 0], [-0.8, 0.6, 0.0], atol=1e-12)
        assert valid.all()
        pts = scene_points(CAM4, depth)
        expect = (pts - self.SPHERE.center) / np.linalg.norm(pts - self.SPHERE.center, axis=-1, keepdims=True)
        assert np.max(np.abs(dirs - expect)) < 1e-6

    def test_distance_raw(self):
        depth = np.full((4, 4), 4.0)
        dist = distance_map(CAM4, depth, self.SPHERE)
        assert dist[0, 0] == pytest.approx(5.0, abs=1e-12)
        np.testing.assert_array_equal(dist, np.linalg.norm(scene_points(CAM4, depth) - self.SPHERE.center, axis=-1))

    def test_distance_monotone_along_ray(self):
        d = [distance_map(CAM4, np.full((4, 4), z), self.SPHERE)[0, 0] for z in (4.0, 5.0, 8.0, 20.0)]
        assert np.all(np.diff(d) > 0)

    def test_distance_on_sphere_is_radius(self):
        cam = CameraModel(64, 64, math.radians(40))
        sphere = SphereSpec((0.0, 0.0, -3.0), 1.0)
        dist = distance_map(cam, np.full((64, 64), 10.0), sphere)
        mask = sphere_normals(cam, sphere).mask
        np.testing.assert_allclose(dist[mask], 1.0, atol=1e-12)

    def test_on_sphere_reflection_law(self):
        cam = CameraModel(96, 64, math.radians(50))
        sphere = SphereSpec((0.3, -0.2, -4.0), 1.0)
        hit = sphere_normals(cam, sphere)
        dirs, valid = direction_map(cam, np.full((64, 96), 10.0), sphere)
        m = hit.mask
        v, n, r = hit.view_dirs[m], hit.normals[m], dirs[m]
        assert valid[m].all()
        assert np.max(np.abs(angle(-v, n) - angle(r, n))) < 1e-6
        # r, v and n are coplanar
        assert np.max(np.abs(np.sum(np.cross(-v, n) * r, axis=-1))) < 1e-6

    def test_direction_unit_length(self):
        cam = CameraModel(48, 32, math.radians(60))
        depth = np.random.default_rng(0).uniform(2, 20, (32, 48))
        dirs, valid = direction_map(cam, depth, SphereSpec((0.0, 0.0, -1.5), 0.3))
        assert np.max(np.abs(np.linalg.norm(dirs[valid], axis=-1) - 1)) < 1e-6

    def test_reflect_examples(self):
        np.testing.assert_allclose(reflect([0, 0, -1.0], [0, 0, 1.0]), [0, 0, 1.0])
        # at grazing incidence the reflection continues along the view ray
        for nv in (1e-1, 1e-2, 1e-3):
            n = np.array([math.sqrt(1 - nv**2), 0.0, nv])
            v = np.array([0.0, 0.0, -1.0])
            assert reflect(v, n) @ v == pytest.approx(1 - 2 * nv**2, abs=1e-12)

    def test_undefined_depth_is_invalid(self):
        depth = np.full((4, 4), 4.0)
        depth[0, 0] = np.nan
        dirs, valid = direction_map(CAM4, depth, self.SPHERE)
        assert not valid[0, 0]
        np.testing.assert_array_equal(dirs[0, 0], 0.0)


class TestSphere:
    def test_center_normal_faces_camera(self):
        cam = CameraModel(65, 65, math.radians(40))
        hit = sphere_normals(cam, SphereSpec((0.0, 0.0, -3.0), 1.0))
        np.testing.assert_allclose(hit.normals[32, 32], [0, 0, 1], atol=1e-12)

    def test_silhouette_tangency(self):
        cam = CameraModel(256, 256, math.radians(40))
        hit = sphere_normals(cam, SphereSpec((0.0, 0.0, -3.0), 1.0))
        m = hit.mask
        inner = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
        edge = m.copy()
        edge[1:-1, 1:-1] &= ~inner
        nv = np.abs(np.sum(hit.normals[edge] * hit.view_dirs[edge], axis=-1))
        assert np.median(nv) < 0.15
        assert np.abs(np.sum(hit.normals[m] * hit.view_dirs[m], axis=-1)).min() < 0.05

    @pytest.mark.parametrize("size", [128, 256])
    def test_mask_area(self, size):
        cam = CameraModel(size, size, math.radians(40))
        sphere = SphereSpec((0.0, 0.0, -3.0), 1.0)
        radius_px = cam.focal * math.tan(math.asin(1 / 3))
        assert radius_px >= 32
        area = sphere_normals(cam, sphere).mask.sum()
        assert abs(area / (math.pi * radius_px**2) - 1) < 0.02

    def test_normals_zero_off_mask(self):
        cam = CameraModel(32, 32, math.radians(40))
        hit = sphere_normals(cam, SphereSpec((0.0, 0.0, -3.0), 1.0))
        assert np.all(hit.normals[~hit.mask] == 0)

    def test_crop_contains_footprint(self):
        cam = CameraModel(64, 48, math.radians(40))
        sphere = SphereSpec((0.4, 0.1, -3.0), 0.5)
        crop = sphere_crop(cam, sphere)
        assert crop.mask.sum() == sphere_normals(cam, sphere).mask.sum()
        assert not crop.mask[0].any() and not crop.mask[-1].any()

    def test_camera_inside_sphere(self):
        with pytest.raises(ValueError, match="inside"):
            sphere_normals(CAM4, SphereSpec((0.0, 0.0, -0.5), 1.0))


class TestConditionMaps:
    def test_bundle(self):
        cam = CameraModel(48, 32, math.radians(60))
        rng = np.random.default_rng(2)
        rgb = rng.random((32, 48, 3))
        depth = rng.uniform(3, 30, (32, 48))
        sphere = SphereSpec((0.2, 0.0, -2.0), 0.4)
        maps = condition_maps(rgb, depth, cam, sphere)
        m = maps.sphere_mask
        assert m.any() and (~m).any()
        assert np.all(maps.rgb_masked[m] == 0)
        np.testing.assert_array_equal(maps.rgb_masked[~m], rgb[~m])
        assert np.all(maps.normals[~m] == 0)
        for arr in (maps.depth, maps.dist):
            assert arr.min() == 0.0 and arr.max() == 1.0
        # the sphere is composited in front, so its depth is the nearest
        assert maps.depth[m].max() < maps.depth[~m].min()

    def test_rgb_shape_mismatch(self):
        with pytest.raises(ValueError, match="resolution"):
            condition_maps(np.zeros((2, 2, 3)), np.ones((4, 4)), CAM4, SphereSpec((0, 0, -3.0), 0.1))

    def test_log_normalize(self):
        x = np.array([0.0, np.e - 1, np.e**2 - 1, np.nan])
        out = log_normalize(x)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 0.0])


class TestPlacement:
    def test_depth_factor_values(self):
        assert sample_depth_factor(0.0) == 0.25
        assert sample_depth_factor(1.0) == pytest.approx(0.98, abs=1e-15)
        assert sample_depth_factor(0.5) == pytest.approx(0.25 + 0.73 * 0.5**0.4, abs=1e-15)
        assert abs(sample_depth_factor(0.5) - 0.8033) < 1e-4

    def test_depth_factor_monotone(self):
        assert np.all(np.diff(sample_depth_factor(np.linspace(0, 1, 1001))) > 0)

    def test_depth_factor_range_check(self):
        with pytest.raises(ValueError):
            sample_depth_factor(1.5)

    def test_scene_depth(self):
        mask = np.ones((2, 2), bool)
        depth = np.array([[4.0, 9.0], [6.0, 5.0]])
        assert sphere_scene_depth(0.5, depth, mask) == 2.0
        assert sphere_scene_depth(0.98, depth, mask) == pytest.approx(0.98 * 4.0)
        mask[0, 0] = False
        assert sphere_scene_depth(0.5, depth, mask) == 2.5

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31))
    def test_scene_depth_bounded(self, u, seed):
        depth = np.random.default_rng(seed).uniform(0.5, 50, (8, 8))
        mask = depth > 10
        if not mask.any():
            return
        assert sphere_scene_depth(sample_depth_factor(u), depth, mask) <= depth[mask].min()

    def test_radius_for_angle(self):
        assert radius_for_angle(2.0, math.radians(30)) == pytest.approx(1.0)
        cam = CameraModel(64, 64, math.radians(60))
        assert world_radius(4.0, cam, 0.2) == pytest.approx(2 * world_radius(2.0, cam, 0.2))

    def test_world_radius_silhouette(self):
        cam = CameraModel(256, 256, math.radians(60))
        dist = 5.0
        sphere = SphereSpec((0.0, 0.0, -dist), world_radius(dist, cam, 0.2))
        area = sphere_normals(cam, sphere).mask.sum()
        assert abs(math.sqrt(area / math.pi) - 0.2 * 256 / 2) < 1.0

    def test_sample_placement_in_front(self):
        cam = CameraModel(64, 48, math.radians(60))
        rng = np.random.default_rng(5)
        depth = rng.uniform(2, 10, (48, 64))
        for _ in range(20):
            sample, sphere = sample_placement(cam, depth, 0.3, rng)
            mask = footprint_mask(cam, sample.image_center, 0.3 * 48 / 2)
            assert sample.sphere_depth <= depth[mask].min()
            assert -sphere.center[2] == pytest.approx(sample.sphere_depth)
            np.testing.assert_allclose(project(cam, sphere.center), sample.image_center, atol=1e-9)


class TestAnimate:
    def test_endpoints_and_midpoint(self):
        a = SphereSpec((0.0, 0.0, -3.0), 1.0)
        b = SphereSpec((1.0, 2.0, -5.0), 0.5)
        specs = animate(a, b, 5)
        assert specs[0] == a and specs[-1] == b
        np.testing.assert_allclose(specs[2].center, [0.5, 1.0, -4.0])
        assert specs[2].radius == pytest.approx(0.75)

    def test_constant(self):
        a = SphereSpec((0.1, 0.2, -3.0), 1.0)
        assert all(s == a for s in animate(a, a, 7))

    def test_needs_two_frames(self):
        with pytest.raises(ValueError):
            animate(SphereSpec((0, 0, -3.0), 1.0), SphereSpec((0, 0, -3.0), 1.0), 1)
