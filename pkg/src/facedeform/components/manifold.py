"""Enhanced manifold representation and the sub-cloud partition.

Every point of the concatenated bone-pre / bone-post / face cloud carries a local
graph feature g_i, a one-hot source label and a sinusoidal code of its position.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import torch
from numpy.typing import ArrayLike

from ..errors import InvalidParameterError
from .cases import SurgicalCase
from .geometry import DisplacementField, LabeledCloud, NeighborIndex, SourceLabel, knn_query

logger = logging.getLogger(__name__)

POSITIONAL_BASE = 10000.0

EdgeFn = Callable[[torch.Tensor], torch.Tensor]


def _as_tensor(values: ArrayLike | torch.Tensor) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(torch.float64)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def sinusoidal_code(values: ArrayLike | torch.Tensor, width: int) -> torch.Tensor:
    """Interleaved sin/cos code of scalar values.

    Channel 2k is sin(v / base^(2k/width)) and channel 2k+1 the matching cosine,
    for k = 0 .. width/2 - 1.

    Args:
        values: (N,) scalars
        width: Even code width

    Returns:
        (N, width) tensor
    """
    if width <= 0 or width % 2:
        raise InvalidParameterError(f"code width must be even and positive, got {width}")
    v = _as_tensor(values).reshape(-1, 1)
    k = torch.arange(width // 2, dtype=torch.float64)
    angles = v / POSITIONAL_BASE ** (2.0 * k / width)
    return torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).reshape(v.shape[0], width)


def positional_width(total_width: int) -> int:
    """Channels actually produced for a total positional width C (3 * even per-axis width)."""
    return 3 * 2 * ((total_width // 3) // 2)


def positional_encode(p: ArrayLike | torch.Tensor, C: int) -> torch.Tensor:
    """Sinusoidal code of 3-D positions, one per-axis code concatenated over x, y, z.

    Args:
        p: (3,) or (N, 3) positions in mm
        C: Total code width; must be even

    Returns:
        (N, positional_width(C)) tensor with every channel in [-1, 1]
    """
    if C <= 0 or C % 2:
        raise InvalidParameterError(f"positional width must be even and positive, got {C}")
    axis_width = 2 * ((C // 3) // 2)
    if axis_width == 0:
        raise InvalidParameterError(f"positional width {C} is too small for three axes")
    pts = _as_tensor(p).reshape(-1, 3)
    return torch.cat([sinusoidal_code(pts[:, a], axis_width) for a in range(3)], dim=1)


def neighbor_weights(nbrs: NeighborIndex, weighting: str = "uniform") -> torch.Tensor:
    """Aggregation weights w_ij for each neighbour list (rows sum to 1)."""
    n, k = nbrs.indices.shape
    if weighting == "uniform":
        return torch.full((n, k), 1.0 / k, dtype=torch.float64)
    if weighting == "gaussian":
        d = torch.as_tensor(nbrs.distances, dtype=torch.float64)
        sigma = d.mean(dim=1, keepdim=True)
        sigma = torch.where(sigma > 0, sigma, torch.ones_like(sigma))
        w = torch.exp(-(d**2) / (2.0 * sigma**2))
        return w / w.sum(dim=1, keepdim=True)
    raise InvalidParameterError(f"unknown neighbour weighting {weighting!r}")


def compute_graph_feature(
    points: ArrayLike | torch.Tensor,
    nbrs: NeighborIndex,
    edge_fn: EdgeFn,
    weighting: str = "uniform",
) -> torch.Tensor:
    """g_i = sum_j w_ij * phi(p_j, p_i - p_j) over the neighbour lists.

    Args:
        points: (N, 3) positions the neighbour index was built over
        nbrs: Neighbour lists
        edge_fn: phi, applied to (..., 6) inputs (p_j, p_i - p_j)
        weighting: ``uniform`` (1/k) or ``gaussian`` (normalised distance kernel)

    Returns:
        (N, d_g) tensor
    """
    pts = _as_tensor(points)
    if len(nbrs) != pts.shape[0]:
        raise InvalidParameterError(
            f"neighbour index covers {len(nbrs)} points, cloud has {pts.shape[0]}"
        )
    idx = torch.as_tensor(nbrs.indices, dtype=torch.long)
    pj = pts[idx]
    rel = pts[:, None, :] - pj
    phi = edge_fn(torch.cat((pj, rel), dim=-1))
    w = neighbor_weights(nbrs, weighting)
    return (w[..., None] * phi).sum(dim=1)


@dataclass(frozen=True)
class EnhancedManifold:
    """The enhanced points of one (sub-)cloud; row i is one EnhancedPoint.

    Attributes:
        positions: (N, 3) p_i, ordered bone-pre, bone-post, face
        graph_feature: (N, d_g) g_i
        labels: (N,) SourceLabel values
        positional: (N, C') l_i
        neighbors: KNN lists over the union
        counts: point count per source (bone-pre, bone-post, face)
    """

    positions: torch.Tensor
    graph_feature: torch.Tensor
    labels: np.ndarray
    positional: torch.Tensor
    neighbors: NeighborIndex
    counts: tuple[int, int, int]

    @property
    def one_hot(self) -> torch.Tensor:
        return torch.as_tensor(SourceLabel.one_hot(self.labels))

    def features(self) -> torch.Tensor:
        """Per-point input (g_i || one-hot label || l_i)."""
        return torch.cat((self.graph_feature, self.one_hot, self.positional), dim=1)

    def slices(self) -> tuple[slice, slice, slice]:
        n1, n2, n3 = self.counts
        return slice(0, n1), slice(n1, n1 + n2), slice(n1 + n2, n1 + n2 + n3)


def build_enhanced_manifold(
    bone_pre: LabeledCloud,
    bone_post: LabeledCloud,
    face: LabeledCloud,
    k: int,
    C: int,
    edge_fn: EdgeFn,
    weighting: str = "uniform",
) -> EnhancedManifold:
    """Concatenate the three structures and encode them as one cloud.

    KNN and graph features are computed over the union so that neighbourhoods
    cross structure boundaries.

    Raises:
        InvalidParameterError: If a cloud carries labels of the wrong source
    """
    expected = (
        (bone_pre, SourceLabel.BONE_PRE),
        (bone_post, SourceLabel.BONE_POST),
        (face, SourceLabel.FACE_PRE),
    )
    for cloud, label in expected:
        if len(cloud) == 0:
            raise InvalidParameterError(f"{label.name.lower()} cloud is empty")
        if np.any(cloud.labels != int(label)):
            raise InvalidParameterError(f"cloud passed as {label.name.lower()} has other labels")

    positions_np = np.concatenate([bone_pre.points, bone_post.points, face.points])
    labels = np.concatenate([bone_pre.labels, bone_post.labels, face.labels])
    nbrs = knn_query(positions_np, k)
    positions = torch.as_tensor(positions_np)
    return EnhancedManifold(
        positions=positions,
        graph_feature=compute_graph_feature(positions, nbrs, edge_fn, weighting),
        labels=labels,
        positional=positional_encode(positions, C),
        neighbors=nbrs,
        counts=(len(bone_pre), len(bone_post), len(face)),
    )


@dataclass(frozen=True)
class SubCloudPartition:
    """Disjoint index lists per sub-cloud.

    ``bone[s]`` indexes both bone-pre and bone-post (pointwise correspondence);
    ``face[s]`` indexes the face cloud.
    """

    bone: tuple[np.ndarray, ...]
    face: tuple[np.ndarray, ...]
    n_bone: int
    n_face: int

    def __len__(self) -> int:
        return len(self.face)

    @property
    def bone_pre(self) -> tuple[np.ndarray, ...]:
        return self.bone

    @property
    def bone_post(self) -> tuple[np.ndarray, ...]:
        return self.bone

    @property
    def face_indices(self) -> np.ndarray:
        """All sampled face indices, ascending."""
        return np.sort(np.concatenate(self.face))


def _deal(n: int, S: int, m: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    chosen = rng.permutation(n)[: S * m]
    return tuple(np.ascontiguousarray(chosen[s::S]) for s in range(S))


def partition_subclouds(case: SurgicalCase, S: int, m: int, seed: int) -> SubCloudPartition:
    """Split a case into S disjoint sub-clouds of m bone and m face points each.

    Indices are shuffled by a seeded permutation and dealt round-robin.

    Raises:
        InvalidParameterError: If S * m exceeds a structure's point count
    """
    if S < 1 or m < 1:
        raise InvalidParameterError(f"S and m must be positive (S={S}, m={m})")
    n_bone, n_face = len(case.bone_pre), len(case.face_pre)
    if S * m > min(n_bone, n_face):
        raise InvalidParameterError(
            f"{S} sub-clouds of {m} points need {S * m}, have bone={n_bone} face={n_face}"
        )
    rng = np.random.default_rng(seed)
    bone = _deal(n_bone, S, m, rng)
    face = _deal(n_face, S, m, rng)
    return SubCloudPartition(bone=bone, face=face, n_bone=n_bone, n_face=n_face)


def split_field(partition: SubCloudPartition, field: DisplacementField) -> list[np.ndarray]:
    """Cut a field over the sampled face points into per-sub-cloud arrays."""
    lookup = np.full(partition.n_face, -1, dtype=np.int64)
    lookup[field.indices] = np.arange(len(field))
    parts = []
    for face_idx in partition.face:
        rows = lookup[face_idx]
        if np.any(rows < 0):
            raise InvalidParameterError("field does not cover every sampled face point")
        parts.append(field.vectors[rows])
    return parts


def fuse_subclouds(
    partition: SubCloudPartition, sparse_fields: Sequence[ArrayLike | DisplacementField]
) -> DisplacementField:
    """Scatter per-sub-cloud displacements back to their face indices.

    Returns:
        Field over all sampled face points, indices ascending

    Raises:
        InvalidParameterError: If the number or length of fields does not match
    """
    if len(sparse_fields) != len(partition):
        raise InvalidParameterError(
            f"{len(sparse_fields)} fields for {len(partition)} sub-clouds"
        )
    full = np.zeros((partition.n_face, 3), dtype=np.float64)
    for s, (face_idx, part) in enumerate(zip(partition.face, sparse_fields, strict=True)):
        vectors = part.vectors if isinstance(part, DisplacementField) else np.asarray(part)
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
        if vectors.shape[0] != face_idx.shape[0]:
            raise InvalidParameterError(
                f"sub-cloud {s}: {vectors.shape[0]} vectors for {face_idx.shape[0]} points"
            )
        full[face_idx] = vectors
    indices = partition.face_indices
    return DisplacementField(indices, full[indices])
