"""Rigid registration: landmark least-squares initialisation and point-to-point ICP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..errors import DegenerateConfigurationError, InternalConsistencyError, InvalidParameterError
from .geometry import PointCloud, as_points

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t with R a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOL):
            raise InvalidParameterError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidParameterError("rotation matrix must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(
        cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0),
        center: ArrayLike | None = None,
    ) -> RigidTransform:
        """Rotation by ``rotvec`` (axis * radians) about ``center``, then a shift."""
        r = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        t = np.asarray(translation, dtype=np.float64)
        if center is not None:
            c = np.asarray(center, dtype=np.float64)
            t = t + c - r @ c
        return cls(r, t)

    def apply(self, points: ArrayLike | PointCloud) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_dict(self) -> dict[str, list]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def _best_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid fit from the cross-covariance SVD."""
    src_c = source.mean(axis=0)
    tgt_c = target.mean(axis=0)
    h = (source - src_c).T @ (target - tgt_c)
    u, _, vt = np.linalg.svd(h)
    # Reflection guard: flip the weakest direction if the fit is improper
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    correction = np.diag([1.0, 1.0, d])
    r = vt.T @ correction @ u.T
    return RigidTransform(r, tgt_c - r @ src_c)


def landmark_rigid_init(
    source_pts: ArrayLike | PointCloud, target_pts: ArrayLike | PointCloud
) -> RigidTransform:
    """Rigid transform that best maps corresponding landmarks onto each other.

    Args:
        source_pts: (n, 3) landmarks on the moving structure
        target_pts: (n, 3) corresponding landmarks on the fixed structure

    Returns:
        The minimiser of sum ||R s_i + t - t_i||^2

    Raises:
        DegenerateConfigurationError: Fewer than three pairs or collinear landmarks
    """
    src = as_points(source_pts)
    tgt = as_points(target_pts)
    if src.shape != tgt.shape:
        raise InvalidParameterError(f"landmark counts differ: {src.shape[0]} vs {tgt.shape[0]}")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError("at least three landmark pairs are required")
    for pts in (src, tgt):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateConfigurationError("landmarks are collinear")
    return _best_fit(src, tgt)


@dataclass(frozen=True)
class IcpResult:
    """Outcome of :func:`icp_refine`."""

    transform: RigidTransform
    iterations: int
    rms_history: list[float] = field(default_factory=list)

    @property
    def rms(self) -> float:
        return self.rms_history[-1] if self.rms_history else float("nan")


def icp_refine(
    source: ArrayLike | PointCloud,
    target: ArrayLike | PointCloud,
    init: RigidTransform | None = None,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP starting from ``init``.

    Each iteration pairs every moved source point with its nearest target point and
    refits the rigid transform in closed form. Iteration stops once the RMS
    correspondence distance improves by less than ``tol`` or after ``max_iters``.

    Raises:
        InternalConsistencyError: If the RMS objective increases between iterations
    """
    src = as_points(source)
    tgt = as_points(target)
    transform = RigidTransform.identity() if init is None else init
    if max_iters < 0:
        raise InvalidParameterError("max_iters must be >= 0")
    if max_iters == 0:
        return IcpResult(transform, 0, [])

    tree = cKDTree(tgt)

    def correspond(t: RigidTransform) -> tuple[float, np.ndarray]:
        dist, idx = tree.query(t.apply(src), k=1)
        return float(np.sqrt(np.mean(dist**2))), idx

    rms_prev, idx = correspond(transform)
    history = [rms_prev]
    iterations = 0
    for iterations in range(1, max_iters + 1):
        candidate = _best_fit(src, tgt[idx])
        rms_new, idx = correspond(candidate)
        if rms_new > rms_prev + 1e-9 * (1.0 + rms_prev):
            raise InternalConsistencyError(
                f"ICP objective increased at iteration {iterations}: {rms_prev} -> {rms_new}"
            )
        transform = candidate
        history.append(rms_new)
        if rms_prev - rms_new < tol:
            break
        rms_prev = rms_new

    logger.debug("ICP finished after %d iteration(s), rms %.6g mm", iterations, history[-1])
    return IcpResult(transform, iterations, history)


def _near(points: np.ndarray, anchors: np.ndarray, radius: float) -> np.ndarray:
    hits = cKDTree(anchors).query_ball_point(points, radius)
    return np.flatnonzero([len(h) > 0 for h in hits])


def align_on_stable_region(
    moving: ArrayLike | PointCloud,
    fixed: ArrayLike | PointCloud,
    stable: ArrayLike,
    *,
    radius: float = 15.0,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> IcpResult:
    """Rigidly map ``moving`` onto ``fixed`` using structures unaffected by surgery.

    Corresponding stable landmarks (same indices in both clouds) give the initial
    transform; ICP then refines it on the points within ``radius`` mm of the
    landmarks, so regions that changed do not pull the fit.
    """
    mov = as_points(moving)
    fix = as_points(fixed)
    idx = np.asarray(stable, dtype=np.int64).reshape(-1)
    init = landmark_rigid_init(mov[idx], fix[idx])
    source = mov[_near(mov, mov[idx], radius)]
    target = fix[_near(fix, fix[idx], radius)]
    return icp_refine(source, target, init, max_iters=max_iters, tol=tol)
