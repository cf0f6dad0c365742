"""Tests for positional codes, graph features, the enhanced manifold and sub-clouds."""

from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from facedeform.components.cases import SurgicalCase
from facedeform.components.geometry import (
    DisplacementField,
    LabeledCloud,
    SourceLabel,
    knn_query,
)
from facedeform.components.manifold import (
    build_enhanced_manifold,
    compute_graph_feature,
    fuse_subclouds,
    partition_subclouds,
    positional_encode,
    positional_width,
    sinusoidal_code,
    split_field,
)
from facedeform.components.network import EdgeFunction
from facedeform.errors import InvalidParameterError


def identity(edges: torch.Tensor) -> torch.Tensor:
    return edges


def relative_only(edges: torch.Tensor) -> torch.Tensor:
    return edges[..., 3:]


def random_case(rng, n_bone: int, n_face: int) -> SurgicalCase:
    bone = rng.normal(size=(n_bone, 3)) * 40
    face = rng.normal(size=(n_face, 3)) * 40
    return SurgicalCase.from_arrays("r", bone, bone + 1.0, face, face + 2.0)


class TestPositionalEncode:
    def test_origin(self):
        code = positional_encode([0.0, 0.0, 0.0], 24).numpy()[0]
        assert code.shape == (24,)
        np.testing.assert_array_equal(code[0::2], 0.0)
        np.testing.assert_array_equal(code[1::2], 1.0)

    def test_scalar_first_channel_pair(self):
        code = sinusoidal_code([1.0], 2).numpy()[0]
        np.testing.assert_allclose(code, [np.sin(1.0), np.cos(1.0)], atol=1e-12)

    def test_odd_width(self):
        with pytest.raises(InvalidParameterError):
            positional_encode([1.0, 2.0, 3.0], 7)

    def test_width_rounds_per_axis(self):
        assert positional_width(24) == 24
        assert positional_width(14) == 12
        assert positional_encode(np.zeros((2, 3)), 14).shape == (2, 12)

    @settings(max_examples=30, deadline=None)
    @given(
        p=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3),
        half=st.integers(3, 16),
    )
    def test_channels_bounded(self, p, half):
        code = positional_encode(p, 2 * half)
        assert torch.all(code.abs() <= 1.0)

    def test_injective_on_grid(self):
        axis = np.arange(10) * 1e-3
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
        codes = positional_encode(grid, 24).numpy()
        assert pdist(codes).min() > 0.0


class TestGraphFeature:
    def test_two_point_hand_example(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        g = compute_graph_feature(pts, knn_query(pts, 1), identity).numpy()
        np.testing.assert_allclose(g, [[1, 0, 0, -1, 0, 0], [0, 0, 0, 1, 0, 0]])

    def test_coincident_cluster_relative_part_zero(self):
        pts = np.ones((5, 3)) * 7.0
        g = compute_graph_feature(pts, knn_query(pts, 3), relative_only)
        assert torch.all(g == 0)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), n=st.integers(5, 100))
    def test_matches_edge_loop(self, seed, n):
        torch.manual_seed(seed)
        phi = EdgeFunction(5, 10.0).double()
        pts = np.random.default_rng(seed).uniform(-30, 30, size=(n, 3))
        nbrs = knn_query(pts, 4)
        with torch.no_grad():
            g = compute_graph_feature(pts, nbrs, phi).numpy()
            expected = np.zeros_like(g)
            for i in range(n):
                for j in nbrs.indices[i]:
                    edge = torch.as_tensor(np.concatenate([pts[j], pts[i] - pts[j]]))
                    expected[i] += phi(edge[None])[0].numpy() / 4
        np.testing.assert_allclose(g, expected, atol=1e-9)

    def test_translation_invariant_with_relative_edges(self, rng):
        torch.manual_seed(0)
        phi = EdgeFunction(4, 10.0).double()
        pts = rng.uniform(-30, 30, size=(60, 3))
        nbrs = knn_query(pts, 5)

        def edge(e: torch.Tensor) -> torch.Tensor:
            return phi(torch.cat((torch.zeros_like(e[..., :3]), e[..., 3:]), dim=-1))

        with torch.no_grad():
            g = compute_graph_feature(pts, nbrs, edge)
            shifted = compute_graph_feature(pts + 7.3, nbrs, edge)
        torch.testing.assert_close(g, shifted, atol=1e-9, rtol=0)

    def test_gaussian_weights_rows_sum_to_one(self, rng):
        pts = rng.normal(size=(20, 3))
        ones = compute_graph_feature(pts, knn_query(pts, 4), lambda e: torch.ones_like(e[..., :1]),
                                     weighting="gaussian")
        torch.testing.assert_close(ones, torch.ones(20, 1, dtype=torch.float64))


class TestEnhancedManifold:
    def clouds(self, rng, n1=12, n2=12, n3=9):
        bone = rng.normal(size=(n1, 3)) * 10
        post = bone if n2 == n1 else rng.normal(size=(n2, 3)) * 10
        return (
            LabeledCloud.uniform(bone, SourceLabel.BONE_PRE),
            LabeledCloud.uniform(post, SourceLabel.BONE_POST),
            LabeledCloud.uniform(rng.normal(size=(n3, 3)) * 10 + 30, SourceLabel.FACE_PRE),
        )

    def test_counts_and_labels(self, rng):
        bone, post, face = self.clouds(rng, 7, 8, 9)
        m = build_enhanced_manifold(bone, post, face, 4, 12, identity)
        assert m.positions.shape == (24, 3)
        assert np.bincount(m.labels).tolist() == [7, 8, 9]
        assert m.features().shape == (24, 6 + 3 + 12)
        assert torch.all(torch.isfinite(m.features()))

    def test_identical_bone_clouds_share_features(self, rng):
        bone, post, face = self.clouds(rng)
        m = build_enhanced_manifold(bone, post, face, 5, 12, identity)
        pre, post_slice, _ = m.slices()
        torch.testing.assert_close(
            m.graph_feature[pre], m.graph_feature[post_slice], atol=1e-12, rtol=0
        )

    def test_wrong_label_rejected(self, rng):
        bone, post, face = self.clouds(rng)
        with pytest.raises(InvalidParameterError):
            build_enhanced_manifold(bone, bone, face, 4, 12, identity)


class TestPartition:
    def test_disjoint_cover(self, rng):
        case = random_case(rng, 520, 500)
        part = partition_subclouds(case, 5, 100, seed=3)
        faces = np.concatenate(part.face)
        assert sorted(faces.tolist()) == list(range(500))
        assert all(len(b) == 100 for b in part.bone)
        assert np.unique(np.concatenate(part.bone)).size == 500
        assert part.bone_pre is part.bone_post

    def test_single_subcloud_takes_first_shuffled(self, rng):
        case = random_case(rng, 50, 40)
        part = partition_subclouds(case, 1, 10, seed=9)
        expected = np.random.default_rng(9).permutation(50)[:10]
        np.testing.assert_array_equal(part.bone[0], expected)

    def test_deterministic(self, rng):
        case = random_case(rng, 60, 60)
        a = partition_subclouds(case, 3, 10, seed=1)
        b = partition_subclouds(case, 3, 10, seed=1)
        for x, y in zip(a.face + a.bone, b.face + b.bone, strict=True):
            np.testing.assert_array_equal(x, y)

    def test_insufficient_points(self, rng):
        with pytest.raises(InvalidParameterError):
            partition_subclouds(random_case(rng, 40, 30), 4, 8, seed=0)


class TestFuse:
    def test_single_subcloud_is_identity_scatter(self, rng):
        case = random_case(rng, 30, 30)
        part = partition_subclouds(case, 1, 30, seed=0)
        values = rng.normal(size=(30, 3))
        fused = fuse_subclouds(part, [values])
        np.testing.assert_array_equal(fused.vectors[part.face[0]], values)

    def test_constant_fields(self, rng):
        case = random_case(rng, 40, 40)
        part = partition_subclouds(case, 2, 10, seed=0)
        a, b = np.full((10, 3), 1.5), np.full((10, 3), -2.0)
        fused = fuse_subclouds(part, [a, b])
        lookup = dict(zip(fused.indices.tolist(), fused.vectors.tolist(), strict=True))
        assert all(lookup[i] == [1.5] * 3 for i in part.face[0])
        assert all(lookup[i] == [-2.0] * 3 for i in part.face[1])

    def test_split_then_fuse_round_trip(self, rng):
        case = random_case(rng, 100, 100)
        part = partition_subclouds(case, 5, 12, seed=4)
        field = DisplacementField(part.face_indices, rng.normal(size=(60, 3)))
        fused = fuse_subclouds(part, split_field(part, field))
        np.testing.assert_array_equal(fused.indices, field.indices)
        np.testing.assert_array_equal(fused.vectors, field.vectors)

    def test_length_mismatch(self, rng):
        case = random_case(rng, 40, 40)
        part = partition_subclouds(case, 2, 10, seed=0)
        with pytest.raises(InvalidParameterError):
            fuse_subclouds(part, [np.zeros((10, 3)), np.zeros((9, 3))])
