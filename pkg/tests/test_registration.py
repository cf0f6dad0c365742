"""Tests for rigid transforms, landmark initialisation and ICP."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from facedeform.components.registration import (
    RigidTransform,
    align_on_stable_region,
    icp_refine,
    landmark_rigid_init,
)
from facedeform.errors import DegenerateConfigurationError, InvalidParameterError


def assert_transform_close(a: RigidTransform, b: RigidTransform, atol: float) -> None:
    np.testing.assert_allclose(a.rotation, b.rotation, atol=atol)
    np.testing.assert_allclose(a.translation, b.translation, atol=atol)


class TestRigidTransform:
    def test_rejects_reflection(self):
        with pytest.raises(InvalidParameterError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidParameterError):
            RigidTransform(np.diag([1.0, 2.0, 0.5]), np.zeros(3))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_compose_with_inverse_is_identity(self, seed):
        rng = np.random.default_rng(seed)
        t = RigidTransform(Rotation.random(random_state=seed).as_matrix(), rng.normal(size=3) * 10)
        assert_transform_close(t.compose(t.inverse()), RigidTransform.identity(), 1e-9)
        assert_transform_close(t.inverse().compose(t), RigidTransform.identity(), 1e-9)

    def test_rotation_about_center_keeps_center(self):
        c = np.array([5.0, -2.0, 3.0])
        t = RigidTransform.from_rotvec([0, 0, np.pi / 3], center=c)
        np.testing.assert_allclose(t.apply(c)[0], c, atol=1e-12)


class TestLandmarkInit:
    def test_identity(self, rng):
        pts = rng.normal(size=(6, 3))
        assert_transform_close(landmark_rigid_init(pts, pts), RigidTransform.identity(), 1e-9)

    def test_recovers_known_transform(self, rng):
        truth = RigidTransform.from_rotvec([0, 0, np.pi / 2], [1.0, 2.0, 3.0])
        src = rng.normal(size=(5, 3)) * 20
        fit = landmark_rigid_init(src, truth.apply(src))
        assert_transform_close(fit, truth, 1e-9)

    def test_collinear_is_degenerate(self):
        line = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        with pytest.raises(DegenerateConfigurationError):
            landmark_rigid_init(line, line + 1.0)

    def test_too_few_pairs(self, rng):
        pts = rng.normal(size=(2, 3))
        with pytest.raises(DegenerateConfigurationError):
            landmark_rigid_init(pts, pts)

    def test_reflected_target_still_proper(self, rng):
        src = rng.normal(size=(8, 3))
        fit = landmark_rigid_init(src, src * [1.0, 1.0, -1.0])
        assert np.linalg.det(fit.rotation) == pytest.approx(1.0)


class TestIcp:
    def test_same_cloud_converges_in_one_iteration(self, rng):
        pts = rng.normal(size=(100, 3)) * 30
        result = icp_refine(pts, pts)
        assert result.iterations == 1
        assert_transform_close(result.transform, RigidTransform.identity(), 1e-9)

    def test_zero_iterations_returns_init(self, rng):
        pts = rng.normal(size=(20, 3))
        init = RigidTransform.from_rotvec([0.1, 0, 0], [1, 0, 0])
        result = icp_refine(pts, pts, init, max_iters=0)
        assert result.transform is init
        assert result.iterations == 0

    def test_recovers_small_perturbation(self, tiny_case):
        bone = tiny_case.bone_pre.points
        truth = RigidTransform.from_rotvec(
            np.deg2rad(3.0) * np.array([0.6, 0.8, 0.0]), [1.2, -1.0, 0.5], center=bone.mean(0)
        )
        result = icp_refine(bone, truth.apply(bone), max_iters=100, tol=1e-12)
        assert_transform_close(result.transform, truth, 1e-3)

    def test_rms_never_increases(self, tiny_case):
        bone = tiny_case.bone_pre.points
        moved = RigidTransform.from_rotvec([0.05, -0.03, 0.02], [2.0, 0.0, -1.0]).apply(bone)
        result = icp_refine(bone, moved, max_iters=50, tol=1e-9)
        assert np.all(np.diff(result.rms_history) <= 1e-9)


def test_align_on_stable_region_ignores_moved_segment(tiny_case):
    # bone_post differs from bone_pre only on planned segments
    stable = tiny_case.stable_landmarks["bone"]
    shift = RigidTransform.from_rotvec([0.0, 0.02, 0.0], [3.0, -2.0, 1.0])
    moved = shift.apply(tiny_case.bone_post)
    fit = align_on_stable_region(moved, tiny_case.bone_pre, stable, max_iters=50, tol=1e-10)
    assert_transform_close(fit.transform, shift.inverse(), 1e-6)
