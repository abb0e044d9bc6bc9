"""Depth colormap export: endpoint contract, determinism, validation."""

import numpy as np
import pytest
from PIL import Image

from depthadapt.errors import ConfigError, ShapeError
from depthadapt.viz import DEPTH_LUT, colorize_depth, export_viz

NEAR_COLOR = (31, 26, 89)
FAR_COLOR = (252, 68, 43)


class TestColormap:
    def test_lut_anchors_pinned(self):
        assert tuple(DEPTH_LUT[0]) == NEAR_COLOR
        assert tuple(DEPTH_LUT[64]) == (33, 144, 140)
        assert tuple(DEPTH_LUT[128]) == (66, 190, 113)
        assert tuple(DEPTH_LUT[192]) == (219, 216, 71)
        assert tuple(DEPTH_LUT[255]) == FAR_COLOR

    def test_range_min_maps_to_first_color(self):
        out = colorize_depth(np.full((4, 5), 0.5), (0.5, 10.0))
        assert out.shape == (4, 5, 3)
        assert np.all(out == NEAR_COLOR)

    def test_range_max_maps_to_last_color(self):
        out = colorize_depth(np.full((4, 5), 10.0), (0.5, 10.0))
        assert np.all(out == FAR_COLOR)

    def test_out_of_range_clamped(self):
        lo = colorize_depth(np.full((2, 2), -3.0), (0.5, 10.0))
        hi = colorize_depth(np.full((2, 2), 99.0), (0.5, 10.0))
        assert np.all(lo == NEAR_COLOR)
        assert np.all(hi == FAR_COLOR)

    def test_constant_map_constant_color(self):
        out = colorize_depth(np.full((8, 8), 4.2), (0.5, 10.0))
        assert len(np.unique(out.reshape(-1, 3), axis=0)) == 1

    def test_deeper_pixels_get_higher_indices(self):
        ramp = np.linspace(0.5, 10.0, 256)[None, :]
        out = colorize_depth(ramp, (0.5, 10.0))
        # red channel of this table rises overall from near to far
        assert out[0, -1, 0] > out[0, 0, 0]

    def test_bad_range_rejected(self):
        with pytest.raises(ConfigError):
            colorize_depth(np.ones((2, 2)), (5.0, 5.0))
        with pytest.raises(ConfigError):
            colorize_depth(np.ones((2, 2)), (float("nan"), 1.0))

    def test_bad_shape_rejected(self):
        with pytest.raises(ShapeError):
            colorize_depth(np.ones((2, 2, 3)), (0.0, 1.0))


class TestExport:
    def test_png_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.5, 10.0, size=(16, 20))
        path = tmp_path / "d.png"
        export_viz(depth, path, (0.5, 10.0))
        back = np.asarray(Image.open(path).convert("RGB"))
        np.testing.assert_array_equal(back, colorize_depth(depth, (0.5, 10.0)))

    def test_byte_determinism(self, tmp_path):
        depth = np.random.default_rng(1).uniform(1.0, 9.0, size=(16, 20))
        export_viz(depth, tmp_path / "a.png", (0.5, 10.0))
        export_viz(depth, tmp_path / "b.png", (0.5, 10.0))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            export_viz(np.ones((4, 4)), tmp_path / "no" / "dir" / "x.png", (0.0, 2.0))
