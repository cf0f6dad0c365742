"""Tests for the deviation colour map and the PNG preview."""

from __future__ import annotations

import numpy as np
from PIL import Image

from facedeform.components.geometry import PointCloud, TriMesh
from facedeform.utils.heatmap import deviation_colors, render_heatmap_png


def test_colour_stops():
    colors = deviation_colors([0.0, 4.0, -2.0, -4.0, 2.0])
    assert colors.tolist() == [
        [0, 255, 0],
        [255, 0, 0],
        [0, 128, 255],
        [0, 0, 255],
        [255, 128, 0],
    ]
    assert colors.dtype == np.uint8


def test_clamped_beyond_four_millimetres():
    colors = deviation_colors([10.0, -25.0])
    assert colors.tolist() == [[255, 0, 0], [0, 0, 255]]


def test_png_written(tmp_path):
    verts = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [10.0, 0.0, 10.0], [0.0, 0.0, 10.0]])
    mesh = TriMesh(PointCloud(verts), np.array([[0, 1, 2], [0, 2, 3]]))
    path = render_heatmap_png(mesh, [-3.0, 0.0, 1.0, 5.0], tmp_path / "out" / "heat.png", size=128)
    with Image.open(path) as img:
        assert img.size == (128 + 64, 128)
        assert img.mode == "RGB"
