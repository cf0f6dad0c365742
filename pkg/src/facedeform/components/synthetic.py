"""Synthetic surgical cases with an analytic soft-tissue oracle.

The skull is the anterior half of an ellipsoid shell (+y is anterior, +z cranial) and
the face is that shell pushed outward along its normal by a smooth thickness field.
Bone segments are moved rigidly and the face follows through a normalised Gaussian
blend of the bone displacements.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.distance import cdist

from ..errors import InvalidParameterError
from ..utils.config import RunConfig
from .cases import SurgicalCase
from .geometry import (
    DisplacementField,
    LabeledCloud,
    PointCloud,
    SourceLabel,
    TriMesh,
    as_points,
    farthest_point_sample,
)
from .registration import RigidTransform

logger = logging.getLogger(__name__)

SEMI_AXES = (60.0, 80.0, 70.0)
AXIS_JITTER = 0.05
ELEVATION_LIMIT = 0.42 * np.pi
MIN_COUNT = 100
MAX_TRANSLATION = 8.0
MAX_ROTATION_DEG = 6.0
MAX_BONE_DISPLACEMENT = 10.0
PLAN_SHRINK = 0.8
ZERO_PLAN_EVERY = 8
STABLE_BONE_COUNT = 6

# (region, elevation fraction, azimuth fraction) on the face grid
LANDMARK_PROBES = (
    ("periorbital", 0.78, 0.30),
    ("periorbital", 0.78, 0.70),
    ("periorbital", 0.72, 0.38),
    ("periorbital", 0.72, 0.62),
    ("periorbital", 0.84, 0.50),
    ("periorbital", 0.70, 0.50),
    ("midface", 0.58, 0.50),
    ("midface", 0.52, 0.50),
    ("midface", 0.55, 0.35),
    ("midface", 0.55, 0.65),
    ("midface", 0.48, 0.25),
    ("midface", 0.48, 0.75),
    ("lip_chin", 0.38, 0.50),
    ("lip_chin", 0.34, 0.42),
    ("lip_chin", 0.34, 0.58),
    ("lip_chin", 0.28, 0.50),
    ("lip_chin", 0.18, 0.50),
    ("lip_chin", 0.12, 0.40),
    ("lip_chin", 0.12, 0.60),
)


@dataclass(frozen=True)
class SegmentMove:
    """Rigid repositioning of one bone segment."""

    name: str
    indices: np.ndarray
    transform: RigidTransform

    def describe(self) -> dict:
        return {"segment": self.name, "points": int(self.indices.size), **self.transform.to_dict()}


@dataclass(frozen=True)
class Anatomy:
    """Pre-operative synthetic anatomy and its annotations."""

    bone: LabeledCloud
    face: LabeledCloud
    mesh: TriMesh
    semi_axes: tuple[float, float, float]
    segments: Mapping[str, np.ndarray]
    landmarks: np.ndarray
    landmark_regions: tuple[str, ...]
    stable_bone: np.ndarray
    stable_face: np.ndarray


def _surface(axes: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = axes
    cu = np.cos(u)
    pts = np.stack((a * cu * np.cos(v), b * cu * np.sin(v), c * np.sin(u)), axis=-1)
    normals = pts / axes**2
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return pts, normals


def _grid_shape(n_face: int) -> tuple[int, int]:
    nu = max(10, int(np.ceil(np.sqrt(n_face))))
    return nu, int(np.ceil(n_face / nu))


def _grid_triangles(nu: int, nv: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nu - 1), np.arange(nv - 1), indexing="ij")
    v00 = (i * nv + j).ravel()
    v10 = ((i + 1) * nv + j).ravel()
    v11 = ((i + 1) * nv + j + 1).ravel()
    v01 = (i * nv + j + 1).ravel()
    return np.concatenate([np.stack((v00, v10, v11), 1), np.stack((v00, v11, v01), 1)])


def _outward(triangles: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    normal = np.cross(b - a, c - a)
    centroid = (a + b + c) / 3.0
    flip = np.einsum("ij,ij->i", normal, centroid) < 0
    triangles = triangles.copy()
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return triangles


def _segments(bone: np.ndarray, axes: np.ndarray) -> dict[str, np.ndarray]:
    a, _, c = axes
    x, z = bone[:, 0], bone[:, 2]
    low = z < -0.45 * c
    return {
        "maxilla": np.flatnonzero((z >= -0.35 * c) & (z <= -0.05 * c)),
        "mandible": np.flatnonzero(low & (np.abs(x) >= 0.2 * a)),
        "chin": np.flatnonzero(low & (np.abs(x) < 0.2 * a)),
    }


def _landmarks(param_uv: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
    chosen: list[int] = []
    regions = []
    for region, fu, fv in LANDMARK_PROBES:
        target = np.array([fu, fv])
        order = np.argsort(np.linalg.norm(param_uv - target, axis=1), kind="stable")
        chosen.append(int(next(i for i in order if i not in chosen)))
        regions.append(region)
    return np.asarray(chosen, dtype=np.int64), tuple(regions)


def generate_anatomy(seed: int, n_bone: int, n_face: int, fps_seed_index: int = 0) -> Anatomy:
    """Sample a bone shell and an offset, triangulated face.

    The face grid has at least ``n_face`` vertices; the bone has exactly ``n_bone``
    points picked by farthest-point sampling from random surface candidates.

    Raises:
        InvalidParameterError: If either count is below 100
    """
    if n_bone < MIN_COUNT or n_face < MIN_COUNT:
        raise InvalidParameterError(f"point counts must be >= {MIN_COUNT}")
    rng = np.random.default_rng(seed)
    axes = np.asarray(SEMI_AXES) * (1.0 + rng.uniform(-AXIS_JITTER, AXIS_JITTER, size=3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)

    cand_u = rng.uniform(-ELEVATION_LIMIT, ELEVATION_LIMIT, size=4 * n_bone)
    cand_v = rng.uniform(0.0, np.pi, size=4 * n_bone)
    candidates, _ = _surface(axes, cand_u, cand_v)
    bone = candidates[farthest_point_sample(candidates, n_bone, fps_seed_index)]

    nu, nv = _grid_shape(n_face)
    fu, fv = np.meshgrid(np.linspace(0.0, 1.0, nu), np.linspace(0.0, 1.0, nv), indexing="ij")
    u = -ELEVATION_LIMIT + fu.ravel() * 2.0 * ELEVATION_LIMIT
    v = fv.ravel() * np.pi
    surface, normals = _surface(axes, u, v)
    thickness = 10.0 + 4.0 * np.sin(2.0 * u + phase[0]) * np.cos(3.0 * v + phase[1])
    face = surface + thickness[:, None] * normals
    mesh = TriMesh(PointCloud(face), _outward(_grid_triangles(nu, nv), face))

    landmarks, regions = _landmarks(np.stack((fu.ravel(), fv.ravel()), axis=1))
    cranial = np.flatnonzero(bone[:, 2] > 0.5 * axes[2])
    stable_bone = (
        cranial[farthest_point_sample(bone[cranial], min(STABLE_BONE_COUNT, cranial.size))]
        if cranial.size
        else cranial
    )
    stable_face = landmarks[np.asarray([r == "periorbital" for r in regions])]

    return Anatomy(
        bone=LabeledCloud.uniform(bone, SourceLabel.BONE_PRE),
        face=LabeledCloud.uniform(face, SourceLabel.FACE_PRE),
        mesh=mesh,
        semi_axes=tuple(float(x) for x in axes),
        segments=_segments(bone, axes),
        landmarks=landmarks,
        landmark_regions=regions,
        stable_bone=np.sort(stable_bone),
        stable_face=stable_face,
    )


def apply_surgical_plan(bone: LabeledCloud, plan: Sequence[SegmentMove]) -> LabeledCloud:
    """Move each planned segment rigidly; other points keep their positions.

    Raises:
        InvalidParameterError: If two segments share a point or an index is out of range
    """
    moved = bone.points.copy()
    seen = np.zeros(len(bone), dtype=bool)
    for move in plan:
        idx = np.asarray(move.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(bone)):
            raise InvalidParameterError(f"segment {move.name} indexes outside the bone cloud")
        if np.any(seen[idx]) or np.unique(idx).size != idx.size:
            raise InvalidParameterError(f"segment {move.name} overlaps another segment")
        seen[idx] = True
        moved[idx] = move.transform.apply(bone.points[idx])
    return LabeledCloud.uniform(moved, SourceLabel.BONE_POST)


def oracle_face_displacement(
    face: ArrayLike | PointCloud,
    bone_pre: ArrayLike | PointCloud,
    bone_disp: ArrayLike | DisplacementField,
    tau: float = 15.0,
    chunk: int = 4096,
) -> DisplacementField:
    """delta(f) = sum_i K_i db_i / sum_i K_i with K_i = exp(-|f - b_i|^2 / (2 tau^2)).

    Face points whose kernel sum underflows get zero displacement and are marked in
    ``flagged``.
    """
    if tau <= 0:
        raise InvalidParameterError(f"kernel width must be positive, got {tau}")
    f = as_points(face)
    b = as_points(bone_pre)
    db = bone_disp.vectors if isinstance(bone_disp, DisplacementField) else bone_disp
    db = np.asarray(db, dtype=np.float64).reshape(-1, 3)
    if db.shape[0] != b.shape[0]:
        raise InvalidParameterError("one bone displacement is needed per bone point")

    out = np.zeros_like(f)
    flagged = np.zeros(f.shape[0], dtype=bool)
    for start in range(0, f.shape[0], chunk):
        k = np.exp(-cdist(f[start : start + chunk], b, "sqeuclidean") / (2.0 * tau**2))
        total = k.sum(axis=1)
        ok = total > 0
        out[start : start + chunk][ok] = (k[ok] @ db) / total[ok, None]
        flagged[start : start + chunk] = ~ok
    if flagged.any():
        logger.warning("%d face point(s) are beyond the oracle kernel reach", int(flagged.sum()))
    return DisplacementField(np.arange(f.shape[0]), out, flagged)


def random_plan(
    bone: np.ndarray, segments: Mapping[str, np.ndarray], rng: np.random.Generator
) -> tuple[SegmentMove, ...]:
    """One to three segment moves, shrunk together until no bone point moves over 10 mm."""
    names = [name for name, idx in segments.items() if idx.size]
    if not names:
        return ()
    count = int(rng.integers(1, min(3, len(names)) + 1))
    picked = sorted(rng.choice(names, size=count, replace=False).tolist())
    raw = []
    for name in picked:
        direction = rng.normal(size=3)
        axis = rng.normal(size=3)
        raw.append(
            (
                name,
                direction / np.linalg.norm(direction) * rng.uniform(0.0, MAX_TRANSLATION),
                axis / np.linalg.norm(axis) * np.deg2rad(rng.uniform(0.0, MAX_ROTATION_DEG)),
            )
        )

    scale = 1.0
    while True:
        plan = tuple(
            SegmentMove(
                name,
                segments[name],
                RigidTransform.from_rotvec(
                    scale * rotvec, scale * shift, center=bone[segments[name]].mean(axis=0)
                ),
            )
            for name, shift, rotvec in raw
        )
        worst = max(
            np.linalg.norm(m.transform.apply(bone[m.indices]) - bone[m.indices], axis=1).max()
            for m in plan
        )
        if worst <= MAX_BONE_DISPLACEMENT:
            return plan
        scale *= PLAN_SHRINK


@dataclass(frozen=True)
class SyntheticCase:
    """A generated case with its plan and ground truth."""

    case_id: str
    bone_pre: LabeledCloud
    bone_post: LabeledCloud
    face_pre: LabeledCloud
    face_post: LabeledCloud
    face_mesh: TriMesh
    landmarks: np.ndarray
    landmark_regions: tuple[str, ...]
    plan: tuple[SegmentMove, ...]
    seed: int
    stable_bone: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stable_face: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    flagged: int = 0

    def __post_init__(self) -> None:
        if len(self.bone_pre) != len(self.bone_post) or len(self.face_pre) != len(self.face_post):
            raise InvalidParameterError("pre- and post-op clouds must correspond pointwise")
        lm = np.asarray(self.landmarks)
        if np.unique(lm).size != lm.size or (lm.size and lm.max() >= len(self.face_pre)):
            raise InvalidParameterError("landmarks must be distinct face indices")

    def to_surgical_case(self) -> SurgicalCase:
        return SurgicalCase(
            self.case_id,
            self.bone_pre,
            self.bone_post,
            self.face_pre,
            self.face_post,
            self.face_mesh,
            self.landmarks,
            self.landmark_regions,
            {"bone": self.stable_bone, "face": self.stable_face},
        )


def make_case(index: int, config: RunConfig, seed: int) -> SyntheticCase:
    """Case ``index`` of the dataset seeded by ``seed``; every eighth case has no plan."""
    rng = np.random.default_rng([seed, index])
    case_seed = int(rng.integers(2**31 - 1))
    anatomy = generate_anatomy(case_seed, config.n_bone, config.n_face, config.fps_seed_index)
    bone = anatomy.bone.points
    plan = () if index % ZERO_PLAN_EVERY == 0 else random_plan(bone, anatomy.segments, rng)
    bone_post = apply_surgical_plan(anatomy.bone, plan)
    delta = oracle_face_displacement(
        anatomy.face, bone, bone_post.points - bone, config.oracle_tau
    )
    face_post = anatomy.face.points + delta.vectors if plan else anatomy.face.points.copy()
    return SyntheticCase(
        case_id=f"case_{index:03d}",
        bone_pre=anatomy.bone,
        bone_post=bone_post,
        face_pre=anatomy.face,
        face_post=LabeledCloud.uniform(face_post, SourceLabel.FACE_PRE),
        face_mesh=anatomy.mesh,
        landmarks=anatomy.landmarks,
        landmark_regions=anatomy.landmark_regions,
        plan=plan,
        seed=case_seed,
        stable_bone=anatomy.stable_bone,
        stable_face=anatomy.stable_face,
        flagged=int(delta.flagged.sum()),
    )


def generate_dataset(
    count: int,
    config: RunConfig,
    seed: int,
    out_dir: str | Path | None = None,
    pool=None,
) -> list[SyntheticCase]:
    """Generate ``count`` cases and, with ``out_dir``, write one directory per case.

    Args:
        count: Number of cases, at least 1
        config: Supplies point counts, oracle width and FPS seed
        seed: Master seed; per-case seeds derive from (seed, index)
        out_dir: Destination root, or None to keep the cases in memory only
        pool: Optional WorkerPool for concurrent generation

    Returns:
        Cases in index order
    """
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    indices = range(count)
    if pool is None:
        cases = [make_case(i, config, seed) for i in indices]
    else:
        cases = pool.map_ordered(lambda i: make_case(i, config, seed), indices)

    if out_dir is not None:
        from ..utils.manifest import write_case

        root = Path(out_dir)
        for case in cases:
            write_case(case, root / case.case_id)
        logger.info("Wrote %d synthetic case(s) to %s", len(cases), root)
    return cases
