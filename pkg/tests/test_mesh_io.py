"""Tests for the ASCII PLY and OBJ readers and writers."""

from __future__ import annotations

import numpy as np
import pytest

from facedeform.components.geometry import LabeledCloud, PointCloud, SourceLabel, TriMesh
from facedeform.errors import (
    InvalidParameterError,
    MeshConstructionError,
    ParseError,
    UnsupportedFaceError,
)
from facedeform.utils.mesh_io import (
    read_indexed_ply,
    read_obj,
    read_ply,
    read_ply_table,
    write_heatmap_ply,
    write_indexed_ply,
    write_obj,
    write_ply,
)

HEADER = "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\n" \
    "property float z\n{extra}end_header\n"


def write_text(path, text):
    path.write_text(text, encoding="ascii")
    return path


class TestPly:
    def test_round_trip(self, tmp_path, rng):
        pts = rng.uniform(-150, 150, size=(50, 3))
        labels = rng.integers(0, 3, size=50)
        cloud = LabeledCloud(PointCloud(pts), labels)
        write_ply(cloud, tmp_path / "c.ply")
        back = read_ply(tmp_path / "c.ply")
        np.testing.assert_allclose(back.points, pts, atol=1e-6)
        np.testing.assert_array_equal(back.labels, labels)

    def test_missing_label_uses_default(self, tmp_path):
        path = write_text(tmp_path / "a.ply", HEADER.format(n=2, extra="") + "0 0 0\n1 2 3\n")
        assert read_ply(path).labels.tolist() == [2, 2]
        assert read_ply(path, SourceLabel.BONE_POST).labels.tolist() == [1, 1]

    def test_short_body_is_error_at_eof(self, tmp_path):
        body = "".join(f"{i} 0 0\n" for i in range(9))
        path = write_text(tmp_path / "a.ply", HEADER.format(n=10, extra="") + body)
        with pytest.raises(ParseError) as info:
            read_ply(path)
        assert info.value.line is None
        assert "EOF" in str(info.value)

    def test_label_out_of_range(self, tmp_path):
        text = HEADER.format(n=2, extra="property uchar label\n") + "0 0 0 1\n1 1 1 3\n"
        path = write_text(tmp_path / "a.ply", text)
        with pytest.raises(ParseError, match="label out of range") as info:
            read_ply(path)
        assert info.value.line == 10

    def test_non_numeric_token_names_line(self, tmp_path):
        path = write_text(tmp_path / "a.ply", HEADER.format(n=2, extra="") + "0 0 0\n1 x 3\n")
        with pytest.raises(ParseError) as info:
            read_ply(path)
        assert info.value.line == 9

    def test_missing_magic(self, tmp_path):
        path = write_text(tmp_path / "a.ply", "plx\n")
        with pytest.raises(ParseError):
            read_ply_table(path)

    def test_binary_format_rejected(self, tmp_path):
        path = write_text(tmp_path / "a.ply", "ply\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(ParseError) as info:
            read_ply_table(path)
        assert info.value.line == 2

    def test_indexed_round_trip(self, tmp_path, rng):
        idx = np.array([4, 0, 9])
        pts = rng.normal(size=(3, 3))
        write_indexed_ply(idx, pts, tmp_path / "s.ply")
        back_idx, back_pts = read_indexed_ply(tmp_path / "s.ply")
        np.testing.assert_array_equal(back_idx, idx)
        np.testing.assert_allclose(back_pts, pts, atol=1e-8)

    def test_heatmap_ply_colours(self, tmp_path):
        mesh = TriMesh(PointCloud(np.eye(3)), np.array([[0, 1, 2]]))
        write_heatmap_ply(mesh, [0.0, 7.0, -2.0], tmp_path / "h.ply")
        table = read_ply_table(tmp_path / "h.ply")
        rgb = np.column_stack([table.vertex[c] for c in ("red", "green", "blue")])
        np.testing.assert_array_equal(rgb, [[0, 255, 0], [255, 0, 0], [0, 128, 255]])
        np.testing.assert_array_equal(table.faces, [[0, 1, 2]])

    def test_heatmap_length_mismatch(self, tmp_path):
        mesh = TriMesh(PointCloud(np.eye(3)), np.array([[0, 1, 2]]))
        with pytest.raises(InvalidParameterError):
            write_heatmap_ply(mesh, [0.0, 1.0], tmp_path / "h.ply")


OBJ_TRIANGLE = "v 0 0 0\nv 1 0 0\nv 0 1 0\n"


class TestObj:
    def test_unit_triangle(self, tmp_path):
        mesh = read_obj(write_text(tmp_path / "t.obj", OBJ_TRIANGLE + "f 1 2 3\n"))
        assert mesh.triangles.shape == (1, 3)
        assert len(mesh.vertices) == 3

    def test_quad_is_unsupported(self, tmp_path):
        path = write_text(tmp_path / "q.obj", OBJ_TRIANGLE + "v 1 1 0\nf 1 2 3 4\n")
        with pytest.raises(UnsupportedFaceError) as info:
            read_obj(path)
        assert info.value.line == 5

    @pytest.mark.parametrize("face", ["f 1 2 5", "f 0 1 2"])
    def test_bad_index(self, tmp_path, face):
        path = write_text(tmp_path / "b.obj", OBJ_TRIANGLE + face + "\n")
        with pytest.raises(ParseError) as info:
            read_obj(path)
        assert info.value.line == 4
        assert not isinstance(info.value, UnsupportedFaceError)

    def test_degenerate_face(self, tmp_path):
        path = write_text(tmp_path / "d.obj", OBJ_TRIANGLE + "v 2 0 0\nf 1 2 4\n")
        with pytest.raises(MeshConstructionError):
            read_obj(path)

    def test_round_trip(self, tmp_path, tiny_case):
        write_obj(tiny_case.face_mesh, tmp_path / "f.obj")
        back = read_obj(tmp_path / "f.obj")
        np.testing.assert_array_equal(back.triangles, tiny_case.face_mesh.triangles)
        np.testing.assert_allclose(
            back.vertices.points, tiny_case.face_mesh.vertices.points, atol=1e-6
        )
