from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from probefuse.envmap import LaplacianPyramid, compose_log2, level_shapes
from probefuse.fusion import (
    Adam,
    FusionConfig,
    FusionError,
    ProbeObservation,
    frame_data_loss,
    fuse,
    loss_step,
    saturation_mask,
    with_overrides,
)
from probefuse.geom_maps import CameraModel, SphereSpec, sphere_crop
from probefuse.render import render_probe
from probefuse.synth import AnalyticEnv, DiskLight, SequenceScript, direction_from_angles, gen_observations

CAMERA = CameraModel(32, 32, math.radians(40.0))
SPHERES = {"mirror": SphereSpec((0.0, 0.0, -3.0), 1.0), "diffuse": SphereSpec((0.0, 0.0, -3.0), 1.0)}
SMALL = FusionConfig(iterations_per_frame=60, env_width=64, env_height=32, levels=4, diffuse_samples=16)


def small_scene(frames=1, noise=0.0, seed=0):
    light = DiskLight(direction_from_angles(0.5, 2.6), math.radians(12), 20.0)
    env = AnalyticEnv(0.2, (light,))
    return gen_observations(env, CAMERA, SPHERES, noise_sigma=noise, seed=seed,
                            script=SequenceScript(frames), env_width=64, samples=32)


def observation_from_pyramid(pyr, material, ev, frame=0):
    crop = sphere_crop(CAMERA, SPHERES[material])
    m = crop.mask
    pred, _ = render_probe(pyr, crop.normals[m], crop.view_dirs[m], material, ev, SMALL.diffuse_samples, 0)
    img = np.zeros(m.shape + (3,))
    img[m] = np.clip(pred, 0, 1)
    return ProbeObservation.from_crop(img, material, ev, frame, SPHERES[material], CAMERA, crop)


class TestSaturationMask:
    def test_examples(self):
        assert saturation_mask(0.99, 0.99, 0.98) == 0
        assert saturation_mask(0.99, 0.50, 0.98) == 1
        assert saturation_mask(0.50, 0.99, 0.98) == 1
        assert np.all(saturation_mask(np.zeros((4, 3)), np.zeros((4, 3)), 0.98) == 1)


class TestAdam:
    def test_matches_reference_update(self):
        # scalar reference written from the textbook update rule
        p = [np.array([1.0, -2.0])]
        opt = Adam([p], lr=0.1)
        ref = np.array([1.0, -2.0])
        m = v = np.zeros(2)
        for t in range(1, 6):
            g = 2 * ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            opt.step({0: [2 * p[0]]})
            np.testing.assert_allclose(p[0], ref, rtol=1e-14)

    def test_groups_step_independently(self):
        a, b = [np.ones(1)], [np.ones(1)]
        opt = Adam([a, b], lr=0.5)
        opt.step({0: [np.ones(1)]})
        assert b[0][0] == 1.0 and a[0][0] == pytest.approx(0.5)
        assert opt.t == [1, 0]


class TestLossStep:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        pyr = LaplacianPyramid([rng.normal(0, 0.3, s + (3,)) - (2 if i == 3 else 0)
                                for i, s in enumerate(level_shapes(64, 32, 4))])
        obs = observation_from_pyramid(pyr, "mirror", -3)
        assert obs.image.max() < 0.98
        pyrs = [pyr.copy(), pyr.copy(), pyr.copy()]
        terms, grads = loss_step(pyrs, obs, 1, SMALL)
        assert terms.data == pytest.approx(0.0, abs=1e-28)
        assert terms.temporal == 0.0
        for g in grads.values():
            assert all(np.max(np.abs(lv)) < 1e-12 for lv in g)

    def test_single_frame_has_no_temporal_term(self):
        ds = small_scene()
        pyr = LaplacianPyramid.constant(0.5, 64, 32, 4)
        terms, grads = loss_step([pyr], ds.observations[0], 0, SMALL)
        assert terms.temporal == 0.0 and terms.data > 0
        assert list(grads) == [0]

    def test_temporal_scales_with_lambda(self):
        ds = small_scene(frames=2)
        rng = np.random.default_rng(3)
        pyrs = [LaplacianPyramid([rng.normal(0, 0.2, s + (3,)) for s in level_shapes(64, 32, 4)]) for _ in range(2)]
        obs = [o for o in ds.observations if o.frame == 1 and o.material.kind == "diffuse"][0]
        t1, _ = loss_step(pyrs, obs, 1, with_overrides(SMALL, temporal_weight=0.1), np.random.default_rng(9))
        t2, _ = loss_step(pyrs, obs, 1, with_overrides(SMALL, temporal_weight=0.2), np.random.default_rng(9))
        assert t1.temporal > 0
        assert t2.temporal == pytest.approx(2 * t1.temporal, rel=1e-12)
        assert t2.data == t1.data

    def test_gradient_matches_finite_differences(self):
        ds = small_scene(frames=3)
        rng = np.random.default_rng(4)
        pyrs = [LaplacianPyramid([rng.normal(0, 0.2, s + (3,)) - (1 if i == 3 else 0)
                                  for i, s in enumerate(level_shapes(64, 32, 4))]) for _ in range(3)]
        obs = [o for o in ds.observations if o.frame == 1 and o.material.kind == "mirror" and o.ev == -3][0]
        cfg = with_overrides(SMALL, use_saturation_mask=False)
        terms, grads = loss_step(pyrs, obs, 1, cfg, np.random.default_rng(0))
        eps = 1e-6
        for j in (0, 1, 2):
            lv = pyrs[j].levels[3].reshape(-1)
            for k in range(0, lv.size, 5):
                old = lv[k]
                lv[k] = old + eps
                hi = loss_step(pyrs, obs, 1, cfg, np.random.default_rng(0))[0].total
                lv[k] = old - eps
                lo = loss_step(pyrs, obs, 1, cfg, np.random.default_rng(0))[0].total
                lv[k] = old
                fd = (hi - lo) / (2 * eps)
                a = grads[j][3].reshape(-1)[k]
                assert abs(a - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_saturated_pixels_do_not_pull_down(self):
        pyr = LaplacianPyramid.constant(8.0, 64, 32, 4)
        obs = observation_from_pyramid(pyr, "mirror", 0)
        assert np.all(obs.pixels == 1.0)
        terms, grads = loss_step([pyr], obs, 0, SMALL)
        assert terms.data == 0.0
        assert all(np.all(lv == 0) for lv in grads[0])
        unmasked, g2 = loss_step([pyr], obs, 0, with_overrides(SMALL, use_saturation_mask=False))
        assert unmasked.data > 0
        # without the mask the gradient lowers the radiance (positive gradient for descent)
        assert g2[0][-1].sum() > 0


class TestFuse:
    def test_constant_half_env_starts_converged(self):
        pyr = LaplacianPyramid.constant(0.5, 64, 32, 4)
        obs = [observation_from_pyramid(pyr, m, ev) for m in ("mirror", "diffuse") for ev in (0, -3)]
        result = fuse(obs, with_overrides(SMALL, iterations_per_frame=30))
        assert np.max(np.abs(result.envs[0].data / 0.5 - 1)) < 1e-3
        assert result.loss_trace.max() < 1e-8

    def test_result_shapes_and_frames(self):
        ds = small_scene(frames=2)
        res = fuse(ds.observations, with_overrides(SMALL, iterations_per_frame=5))
        assert res.frames == [0, 1]
        assert len(res.envs) == 2 and res.envs[0].data.shape == (32, 64, 3)
        assert res.loss_trace.shape == (10,)
        np.testing.assert_allclose(np.exp2(compose_log2(res.pyramids[1])), res.envs[1].data)

    def test_reduces_loss(self):
        ds = small_scene()
        before = fuse(ds.observations, with_overrides(SMALL, iterations_per_frame=1))
        after = fuse(ds.observations, with_overrides(SMALL, iterations_per_frame=200, learning_rate=0.05))
        assert frame_data_loss(after, ds.observations)[0] < 0.2 * frame_data_loss(before, ds.observations)[0]

    def test_saturated_texels_are_not_pulled_down(self):
        # a light bright enough to clip the mirror at every bracket
        light = DiskLight(direction_from_angles(0.3, 3.0), math.radians(20), 2.0**16)
        ds = gen_observations(AnalyticEnv(0.2, (light,)), CAMERA, SPHERES, evs=(0.0, -4.0), materials=("mirror",),
                              env_width=64)
        clipped = np.all([o.image.min(axis=-1) >= SMALL.tau for o in ds.observations], axis=0)
        # edge pixels share bilinear taps with unsaturated neighbours, which do constrain those texels
        clipped = binary_erosion(clipped, np.ones((3, 3), bool))
        assert clipped.sum() > 5
        res = fuse(ds.observations, with_overrides(SMALL, iterations_per_frame=200, learning_rate=0.05))
        crop = sphere_crop(CAMERA, SPHERES["mirror"])
        m = crop.mask
        pred, _ = render_probe(res.pyramids[0], crop.normals[m], crop.view_dirs[m], "mirror", -4.0)
        full = np.zeros(m.shape + (3,))
        full[m] = pred
        # the brightest unsaturated constraint is the clip level at the darkest bracket
        assert full[clipped].min() >= SMALL.tau - 1e-3


@pytest.mark.slow
class TestFuseHdrScene:
    def test_rerenders_observations(self, hdr_dataset, hdr_fused):
        result = hdr_fused[0]
        losses = [loss_step(result.pyramids, o, 0, result.config, np.random.default_rng(0))[0].data
                  for o in hdr_dataset.observations]
        assert max(losses) < 1e-3

    def test_loss_trace_moving_average_decreases(self, hdr_fused):
        trace = hdr_fused[0].loss_trace
        blocks = trace[: trace.size // 100 * 100].reshape(-1, 100).mean(axis=1)
        assert np.all(np.diff(blocks) <= 0)

    def test_invariant_to_order_and_seed(self, hdr_dataset, hdr_fused):
        obs = hdr_dataset.observations
        base = frame_data_loss(hdr_fused[0], obs)[0]
        other = fuse(list(reversed(obs)), with_overrides(hdr_fused[0].config, seed=11))
        assert abs(frame_data_loss(other, obs)[0] / base - 1) < 0.05

    def test_deterministic(self):
        ds = small_scene()
        a = fuse(ds.observations, SMALL)
        b = fuse(ds.observations, SMALL)
        np.testing.assert_array_equal(a.envs[0].data, b.envs[0].data)

    def test_divergence_raises(self):
        ds = small_scene()
        with pytest.raises(FusionError) as info:
            fuse(ds.observations, with_overrides(SMALL, learning_rate=500.0))
        assert info.value.iteration is not None

    def test_rejects_empty_and_duplicates(self):
        with pytest.raises(ValueError):
            fuse([])
        ds = small_scene()
        with pytest.raises(ValueError, match="duplicate"):
            fuse(ds.observations + ds.observations[:1])

    def test_callback(self):
        ds = small_scene()
        seen = []
        fuse(ds.observations, with_overrides(SMALL, iterations_per_frame=3), callback=lambda s, t: seen.append(s))
        assert seen == [0, 1, 2]


class TestConfig:
    def test_defaults(self):
        c = FusionConfig()
        assert (c.iterations_per_frame, c.learning_rate, c.temporal_weight, c.tau) == (1000, 5e-3, 0.1, 0.98)
        assert (c.levels, c.env_width, c.env_height) == (8, 512, 256)

    def test_round_trip_and_unknown(self):
        c = FusionConfig(learning_rate=0.01)
        assert FusionConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError, match="bogus"):
            FusionConfig.from_dict({"bogus": 1})

    @pytest.mark.parametrize("field, value", [("learning_rate", 0.0), ("tau", 1.0), ("env_width", 100),
                                              ("temporal_weight", -1.0), ("iterations_per_frame", 0)])
    def test_validation(self, field, value):
        with pytest.raises(ValueError):
            FusionConfig(**{field: value})

    def test_observation_validation(self):
        crop = sphere_crop(CAMERA, SPHERES["mirror"])
        img = np.zeros(crop.mask.shape + (3,))
        with pytest.raises(ValueError, match="mirror or diffuse"):
            ProbeObservation.from_crop(img, "glossy", 0, 0, SPHERES["mirror"], CAMERA, crop)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            ProbeObservation.from_crop(img + 2, "mirror", 0, 0, SPHERES["mirror"], CAMERA, crop)
