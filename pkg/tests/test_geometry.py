"""Tests for point/mesh types, KNN, farthest-point sampling and set metrics."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facedeform.components.geometry import (
    DisplacementField,
    LabeledCloud,
    PointCloud,
    SourceLabel,
    TriMesh,
    chamfer_distance,
    closest_points_on_triangles,
    farthest_point_sample,
    hausdorff_distance,
    knn_query,
    mesh_deviations,
    point_to_mesh_deviation,
)
from facedeform.components.synthetic import generate_anatomy
from facedeform.errors import InvalidParameterError, MeshConstructionError

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def brute_knn(points: np.ndarray, k: int) -> np.ndarray:
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        d2 = np.array([np.sum((points[i] - points[j]) ** 2) for j in others])
        out[i] = others[np.lexsort((others, d2))[:k]]
    return out


def brute_directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([min(np.linalg.norm(p - q) for q in b) for p in a])


def brute_deviations(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    a, b, c = mesh.corners
    out = []
    for p in points:
        offset = p - closest_points_on_triangles(p[None], a, b, c)
        dist2 = np.einsum("tk,tk->t", offset, offset)
        t = int(np.argmin(dist2))
        side = -1.0 if offset[t] @ mesh.normals[t] < 0 else 1.0
        out.append(side * np.sqrt(dist2[t]))
    return np.array(out)


UNIT_TRIANGLE = TriMesh(
    PointCloud(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])),
    np.array([[0, 1, 2]]),
)


class TestTypes:
    def test_point_cloud_rejects_non_finite(self):
        with pytest.raises(InvalidParameterError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_point_cloud_rejects_empty(self):
        with pytest.raises(InvalidParameterError):
            PointCloud(np.zeros((0, 3)))

    def test_labeled_cloud_length_mismatch(self):
        with pytest.raises(InvalidParameterError):
            LabeledCloud(PointCloud(np.zeros((3, 3))), np.zeros(2))

    def test_one_hot_has_single_one(self):
        rows = SourceLabel.one_hot([0, 1, 2, 2])
        assert rows.shape == (4, 3)
        np.testing.assert_array_equal(rows.sum(axis=1), 1.0)
        np.testing.assert_array_equal(rows.argmax(axis=1), [0, 1, 2, 2])

    def test_degenerate_triangle_rejected(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        with pytest.raises(MeshConstructionError):
            TriMesh(PointCloud(pts), np.array([[0, 1, 2]]))

    def test_out_of_range_triangle_rejected(self):
        with pytest.raises(MeshConstructionError):
            TriMesh(UNIT_TRIANGLE.vertices, np.array([[0, 1, 3]]))

    def test_displacement_field_length_mismatch(self):
        with pytest.raises(InvalidParameterError):
            DisplacementField(np.arange(3), np.zeros((2, 3)))


class TestKnn:
    def test_collinear_tie_goes_to_lower_index(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        nbrs = knn_query(pts, 1)
        np.testing.assert_array_equal(nbrs.indices, [[1], [0], [1]])
        np.testing.assert_allclose(nbrs.distances, [[1.0], [1.0], [1.0]])

    def test_full_neighbourhood_is_all_others(self, rng):
        pts = rng.normal(size=(12, 3))
        nbrs = knn_query(pts, 11)
        for i, row in enumerate(nbrs.indices):
            assert sorted(row.tolist()) == [j for j in range(12) if j != i]

    def test_k_must_be_below_count(self):
        with pytest.raises(InvalidParameterError):
            knn_query(np.zeros((4, 3)) + np.arange(4)[:, None], 4)

    def test_grid_ties_match_brute_force(self):
        g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        np.testing.assert_array_equal(knn_query(g, 6).indices, brute_knn(g, 6))

    @settings(max_examples=50, deadline=None)
    @given(seed=seeds, n=st.integers(6, 200), k=st.integers(1, 5))
    def test_matches_brute_force(self, seed, n, k):
        pts = np.random.default_rng(seed).uniform(-50, 50, size=(n, 3))
        nbrs = knn_query(pts, k)
        np.testing.assert_array_equal(nbrs.indices, brute_knn(pts, k))
        assert np.all(np.diff(nbrs.distances, axis=1) >= 0)
        assert not np.any(nbrs.indices == np.arange(n)[:, None])


class TestFarthestPointSample:
    def test_line_picks_far_end(self):
        pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
        np.testing.assert_array_equal(farthest_point_sample(pts, 2, 0), [0, 9])

    def test_single_sample_is_seed(self, rng):
        pts = rng.normal(size=(20, 3))
        np.testing.assert_array_equal(farthest_point_sample(pts, 1, 7), [7])

    def test_all_points_distinct(self, rng):
        pts = rng.normal(size=(30, 3))
        chosen = farthest_point_sample(pts, 30, 4)
        assert sorted(chosen.tolist()) == list(range(30))
        assert chosen[0] == 4

    def test_too_many_samples(self, rng):
        with pytest.raises(InvalidParameterError):
            farthest_point_sample(rng.normal(size=(5, 3)), 6)

    @settings(max_examples=20, deadline=None)
    @given(seed=seeds, n=st.integers(3, 12), m=st.integers(2, 6))
    def test_each_pick_is_greedy_maximin(self, seed, n, m):
        pts = np.random.default_rng(seed).uniform(0, 10, size=(n, 3))
        m = min(m, n)
        chosen = farthest_point_sample(pts, m, 0)
        for s in range(1, m):
            picked = chosen[:s]
            gaps = [
                -1.0 if j in picked else min(np.sum((pts[j] - pts[p]) ** 2) for p in picked)
                for j in range(n)
            ]
            assert gaps[chosen[s]] == pytest.approx(max(gaps))


class TestMetrics:
    def test_hausdorff_examples(self):
        assert hausdorff_distance([[0, 0, 0]], [[3, 4, 0]]) == 5.0
        assert hausdorff_distance([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 2.0

    def test_chamfer_example(self):
        assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0

    def test_identity_is_zero(self, rng):
        pts = rng.normal(size=(40, 3))
        assert hausdorff_distance(pts, pts) == 0.0
        assert chamfer_distance(pts, pts) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(seed=seeds, na=st.integers(1, 60), nb=st.integers(1, 60))
    def test_match_exhaustive_oracles(self, seed, na, nb):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-20, 20, size=(na, 3))
        b = rng.uniform(-20, 20, size=(nb, 3))
        ab, ba = brute_directed(a, b), brute_directed(b, a)
        assert hausdorff_distance(a, b) == pytest.approx(max(ab.max(), ba.max()), rel=1e-9)
        assert hausdorff_distance(a, b) == hausdorff_distance(b, a)
        expected = (np.sum(ab**2) + np.sum(ba**2)) / na
        assert chamfer_distance(a, b) == pytest.approx(expected, rel=1e-9)

    @settings(max_examples=15, deadline=None)
    @given(seed=seeds)
    def test_rigid_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(25, 3))
        shift = rng.uniform(-100, 100, size=3)
        assert hausdorff_distance(a + shift, b + shift) == pytest.approx(
            hausdorff_distance(a, b), rel=1e-9
        )
        assert chamfer_distance(a + shift, b + shift) == pytest.approx(
            chamfer_distance(a, b), rel=1e-9
        )


class TestMeshDeviation:
    def test_point_on_triangle(self):
        assert point_to_mesh_deviation([0.2, 0.2, 0.0], UNIT_TRIANGLE) == 0.0

    @pytest.mark.parametrize("h", [0.5, 1.0, 3.0])
    def test_above_and_below_centroid(self, h):
        c = np.array([1 / 3, 1 / 3, 0.0])
        assert point_to_mesh_deviation(c + [0, 0, h], UNIT_TRIANGLE) == pytest.approx(h)
        assert point_to_mesh_deviation(c - [0, 0, h], UNIT_TRIANGLE) == pytest.approx(-h)

    @pytest.mark.parametrize(
        ("p", "expected"),
        [
            ([2.0, 0.0, 0.0], 1.0),
            ([0.5, -1.0, 0.0], 1.0),
            ([1.0, 1.0, 0.0], np.sqrt(0.5)),
            ([-1.0, -1.0, 1.0], np.sqrt(3.0)),
        ],
    )
    def test_outside_regions_match_analytic_distance(self, p, expected):
        assert abs(point_to_mesh_deviation(p, UNIT_TRIANGLE)) == pytest.approx(expected, abs=1e-9)

    def test_planar_patch_offset(self):
        xs, ys = np.meshgrid(np.linspace(0, 10, 11), np.linspace(0, 10, 11), indexing="ij")
        verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
        tris = []
        for i in range(10):
            for j in range(10):
                a, b, c, d = i * 11 + j, (i + 1) * 11 + j, (i + 1) * 11 + j + 1, i * 11 + j + 1
                tris += [[a, b, c], [a, c, d]]
        mesh = TriMesh(PointCloud(verts), np.array(tris))
        assert np.allclose(mesh.normals, [0, 0, 1])
        dev = mesh_deviations(verts + [0, 0, 2.0], mesh)
        assert dev.mean() == pytest.approx(2.0, abs=0.05)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_face_mesh_matches_full_scan(self, seed):
        mesh = generate_anatomy(seed, 100, 400).mesh
        rng = np.random.default_rng(seed)
        verts = mesh.vertices.points
        near = verts[rng.choice(len(verts), 80, replace=False)] + rng.normal(0, 3.0, (80, 3))
        far = rng.uniform(-300, 300, size=(20, 3))
        points = np.vstack([near, far, verts[:5]])
        np.testing.assert_allclose(
            mesh_deviations(points, mesh), brute_deviations(points, mesh), atol=1e-9
        )

    def test_candidate_count_does_not_change_result(self, rng):
        mesh = generate_anatomy(4, 100, 200).mesh
        picked = mesh.vertices.points[::7]
        points = picked + rng.normal(0, 5.0, picked.shape)
        few = mesh_deviations(points, mesh, chunk=7, seeds=1)
        np.testing.assert_allclose(few, mesh_deviations(points, mesh, seeds=32), atol=1e-12)
