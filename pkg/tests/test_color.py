from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probefuse.color import apply_exposure, luminance, srgb_decode, srgb_encode, srgb_encode_grad


def reference_encode(x):
    # textbook piecewise transfer, written independently of the package
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(np.maximum(x, 0), 1 / 2.4) - 0.055)


class TestExposure:
    def test_examples(self):
        np.testing.assert_array_equal(apply_exposure(np.array([8.0, 8, 8]), -3), [1.0, 1, 1])
        np.testing.assert_array_equal(apply_exposure(np.array([1.0, 2, 4]), -12), [2.0**-12, 2.0**-11, 2.0**-10])

    def test_ev_zero_identity(self, rng):
        x = rng.random((5, 3)) * 100
        np.testing.assert_array_equal(apply_exposure(x, 0), x)

    @settings(max_examples=100, deadline=None)
    # normal floats only: scaling into the subnormal range rounds
    @given(arrays(np.float64, 3, elements=st.one_of(st.just(0.0), st.floats(1e-290, 1e6))),
           st.integers(-20, 20), st.integers(-20, 20))
    def test_composition_exact(self, x, a, b):
        np.testing.assert_array_equal(apply_exposure(x, a + b), apply_exposure(apply_exposure(x, a), b))


class TestSrgb:
    def test_endpoints_and_breakpoint(self):
        assert srgb_encode(0.0) == 0.0
        assert srgb_encode(1.0) == pytest.approx(1.0, abs=1e-15)
        assert srgb_encode(0.0031308) == pytest.approx(0.04045, abs=1e-6)

    def test_matches_reference(self, rng):
        x = rng.random(1000)
        np.testing.assert_allclose(srgb_encode(x), reference_encode(x), atol=1e-15)

    def test_clipping(self):
        assert srgb_encode(5.0) == 1.0
        assert srgb_encode(5.0, clip=False) > 1.0

    def test_round_trip(self, rng):
        x = rng.random(10_000)
        assert np.max(np.abs(srgb_decode(srgb_encode(x)) - x)) < 1e-6

    def test_decode_never_unclips(self):
        assert srgb_decode(srgb_encode(3.0)) == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 2), st.floats(0, 2))
    def test_monotone(self, a, b):
        if a <= b:
            assert srgb_encode(a) <= srgb_encode(b)

    def test_gradient_fd(self, rng):
        x = np.concatenate([rng.uniform(1e-4, 0.003, 50), rng.uniform(0.004, 3, 50)])
        eps = 1e-7
        fd = (srgb_encode(x + eps, clip=False) - srgb_encode(x - eps, clip=False)) / (2 * eps)
        np.testing.assert_allclose(srgb_encode_grad(x), fd, rtol=1e-6)


class TestLuminance:
    @pytest.mark.parametrize("rgb, y", [((1, 1, 1), 1.0), ((1, 0, 0), 0.2126), ((0, 0, 2), 0.1444)])
    def test_examples(self, rgb, y):
        assert luminance(np.array(rgb, dtype=float)) == pytest.approx(y, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 3, elements=st.floats(0, 100)), arrays(np.float64, 3, elements=st.floats(0, 100)),
           st.floats(-10, 10), st.floats(-10, 10))
    def test_linear(self, x, y, a, b):
        assert luminance(a * x + b * y) == pytest.approx(a * luminance(x) + b * luminance(y), abs=1e-9)
