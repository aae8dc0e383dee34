import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyspect import (
    absolute_ev,
    hsv_to_rgb,
    luminous_exposure,
    rgb_to_hsv,
    rgb_to_ycbcr,
)


class TestRgbToYcbcr:
    def test_gray_fixed_point(self):
        assert np.array_equal(rgb_to_ycbcr([128, 128, 128]), [128.0, 128.0, 128.0])

    def test_white_has_neutral_chroma(self):
        np.testing.assert_allclose(rgb_to_ycbcr([255, 255, 255]), [255.0, 128.0, 128.0])

    def test_pure_red(self):
        # coefficients evaluated by hand: y = 0.299*255, cb = 128 - 0.168736*255,
        # cr = 128 + 0.5*255 = 255.5 before the clamp
        y, cb, cr = rgb_to_ycbcr([255, 0, 0])
        assert y == pytest.approx(76.245, abs=1e-9)
        assert cb == pytest.approx(84.97232, abs=1e-9)
        assert cr == 255.0

    def test_all_grays_have_exactly_neutral_chroma(self):
        grays = np.stack([np.arange(256)] * 3, axis=-1)
        out = rgb_to_ycbcr(grays)
        assert np.all(out[:, 1] == 128.0)
        assert np.all(out[:, 2] == 128.0)

    def test_channel_bounds(self):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, size=(4096, 3))
        out = rgb_to_ycbcr(rgb)
        assert out.min() >= 0.0 and out.max() <= 255.0


class TestRgbToHsv:
    def test_pure_red(self):
        np.testing.assert_allclose(rgb_to_hsv([255, 0, 0]), [0.0, 1.0, 1.0])

    def test_achromatic_convention(self):
        h, s, v = rgb_to_hsv([128, 128, 128])
        assert h == 0.0 and s == 0.0
        assert v == pytest.approx(128 / 255)

    def test_blue_sector(self):
        # sector formula: 60 * (4 + (r - g)/delta) with delta = 255
        h, s, v = rgb_to_hsv([0, 128, 255])
        assert h == pytest.approx(240.0 - 60.0 * 128.0 / 255.0, abs=1e-9)
        assert s == 1.0 and v == 1.0

    def test_black(self):
        np.testing.assert_allclose(rgb_to_hsv([0, 0, 0]), [0.0, 0.0, 0.0])

    def test_round_trip_large_sample(self):
        rng = np.random.default_rng(7)
        rgb = rng.integers(0, 256, size=(120_000, 3))
        back = hsv_to_rgb(rgb_to_hsv(rgb))
        assert np.abs(back - rgb).max() < 1e-8

    def test_hue_range(self):
        rng = np.random.default_rng(8)
        hsv = rgb_to_hsv(rng.integers(0, 256, size=(10_000, 3)))
        assert hsv[:, 0].min() >= 0.0 and hsv[:, 0].max() < 360.0
        assert hsv[:, 1:].min() >= 0.0 and hsv[:, 1:].max() <= 1.0


class TestExposure:
    def test_absolute_ev_identity(self):
        assert absolute_ev(1.0, 1.0, 100.0) == 0.0

    def test_absolute_ev_examples(self):
        assert absolute_ev(2.8, 2.0, 100.0) == pytest.approx(math.log2(2.8**2 / 2.0))
        assert absolute_ev(2.8, 2.0, 100.0) == pytest.approx(1.97, abs=0.005)
        assert absolute_ev(2.8, 4.0, 100.0) == pytest.approx(0.97, abs=0.005)

    @given(
        n=st.floats(0.7, 32.0),
        t=st.floats(1e-4, 30.0),
        iso=st.floats(25.0, 25600.0),
    )
    @settings(max_examples=100)
    def test_halving_shutter_adds_one_stop(self, n, t, iso):
        assert absolute_ev(n, t / 2.0, iso) - absolute_ev(n, t, iso) == pytest.approx(
            1.0, abs=1e-9
        )

    @pytest.mark.parametrize("bad", [(0, 1, 100), (1, 0, 100), (1, 1, 0), (-1, 1, 100)])
    def test_absolute_ev_rejects_nonpositive(self, bad):
        with pytest.raises(ValueError):
            absolute_ev(*bad)

    def test_luminous_exposure_table_rows(self):
        assert luminous_exposure(1.0, 4.0) == 4.0
        assert luminous_exposure(70.3, 2.0) == 140.6

    def test_luminous_exposure_zero(self):
        assert luminous_exposure(0.0, 15.0) == 0.0

    @given(
        lux=st.floats(0.0, 1e5),
        t=st.floats(0.0, 100.0),
        a=st.floats(0.0, 10.0),
    )
    @settings(max_examples=50)
    def test_luminous_exposure_bilinear(self, lux, t, a):
        assert luminous_exposure(a * lux, t) == pytest.approx(
            a * luminous_exposure(lux, t), rel=1e-12
        )
        assert luminous_exposure(lux, a * t) == pytest.approx(
            a * luminous_exposure(lux, t), rel=1e-12
        )

    def test_luminous_exposure_rejects_negative(self):
        with pytest.raises(ValueError):
            luminous_exposure(-1.0, 1.0)
