"""Core 3-D point and mesh types, exact nearest-neighbour queries and set metrics.

All coordinates and distances are in millimeters. A single point (Point3) is a
length-3 float array; clouds are (N, 3) float64 arrays wrapped in small dataclasses
so that their invariants are checked once at construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import cKDTree

from ..errors import InvalidParameterError, MeshConstructionError

logger = logging.getLogger(__name__)

# Smallest triangle area accepted when a mesh is built (mm^2)
MIN_TRIANGLE_AREA = 1e-12


class SourceLabel(IntEnum):
    """Anatomical source of a point."""

    BONE_PRE = 0
    BONE_POST = 1
    FACE_PRE = 2

    @staticmethod
    def one_hot(labels: ArrayLike) -> np.ndarray:
        """Expand integer labels to (N, 3) one-hot rows."""
        labels = np.asarray(labels, dtype=np.int64)
        return np.eye(len(SourceLabel), dtype=np.float64)[labels]


def as_points(points: ArrayLike | PointCloud) -> np.ndarray:
    """Return an (N, 3) float64 array, validating shape and finiteness.

    Raises:
        InvalidParameterError: If the input is empty, badly shaped or not finite
    """
    if isinstance(points, PointCloud):
        return points.points
    if isinstance(points, LabeledCloud):
        return points.cloud.points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidParameterError(f"expected an (N, 3) point array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidParameterError("point set is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Ordered, index-addressable set of points.

    Indices are the correspondence key between clouds (bone pre/post, face pre/post).
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", as_points(self.points))

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, indices: ArrayLike) -> PointCloud:
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)])


@dataclass(frozen=True)
class LabeledCloud:
    """A point cloud whose points carry a SourceLabel each."""

    cloud: PointCloud
    labels: np.ndarray

    def __post_init__(self) -> None:
        if not isinstance(self.cloud, PointCloud):
            object.__setattr__(self, "cloud", PointCloud(self.cloud))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != len(self.cloud):
            raise InvalidParameterError(
                f"{labels.shape[0]} labels for {len(self.cloud)} points"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= len(SourceLabel)):
            raise InvalidParameterError("label out of range")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def uniform(cls, points: ArrayLike, label: SourceLabel) -> LabeledCloud:
        """Build a cloud whose points all share one label."""
        cloud = PointCloud(points)
        return cls(cloud, np.full(len(cloud), int(label), dtype=np.int64))

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    def __len__(self) -> int:
        return len(self.cloud)

    def subset(self, indices: ArrayLike) -> LabeledCloud:
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledCloud(self.cloud.subset(indices), self.labels[indices])

    def relabeled(self, label: SourceLabel) -> LabeledCloud:
        return LabeledCloud.uniform(self.points, label)


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh over an ordered vertex cloud.

    Construction rejects out-of-range indices and triangles with (near) zero area.
    Triangle winding defines the outward normal (right-hand rule).
    """

    vertices: PointCloud
    triangles: np.ndarray

    def __post_init__(self) -> None:
        if not isinstance(self.vertices, PointCloud):
            object.__setattr__(self, "vertices", PointCloud(self.vertices))
        tris = np.asarray(self.triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3 or tris.shape[0] == 0:
            raise MeshConstructionError(f"expected (T, 3) triangle indices, got {tris.shape}")
        if tris.min() < 0 or tris.max() >= len(self.vertices):
            raise MeshConstructionError("triangle index out of range")
        object.__setattr__(self, "triangles", tris)
        areas = self.areas
        bad = np.flatnonzero(areas <= MIN_TRIANGLE_AREA)
        if bad.size:
            raise MeshConstructionError(
                f"{bad.size} degenerate triangle(s), first at index {int(bad[0])}"
            )

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices.points
        return v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]

    @property
    def areas(self) -> np.ndarray:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def normals(self) -> np.ndarray:
        """Unit triangle normals."""
        a, b, c = self.corners
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def with_vertices(self, vertices: ArrayLike) -> TriMesh:
        """Same connectivity, new vertex positions."""
        return TriMesh(PointCloud(vertices), self.triangles)


@dataclass(frozen=True)
class NeighborIndex:
    """Exact k-nearest-neighbour lists.

    Row i holds k distinct indices (never i itself) sorted by ascending distance,
    ties broken by ascending index. ``distances`` is aligned with ``indices``.
    """

    indices: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass(frozen=True)
class DisplacementField:
    """Per-point displacement vectors (mm) aligned to a list of owner indices."""

    indices: np.ndarray
    vectors: np.ndarray
    flagged: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if indices.shape[0] != vectors.shape[0]:
            raise InvalidParameterError(
                f"{vectors.shape[0]} displacement vectors for {indices.shape[0]} indices"
            )
        if not np.all(np.isfinite(vectors)):
            raise InvalidParameterError("displacement vectors must be finite")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def dense(cls, vectors: ArrayLike) -> DisplacementField:
        """A field over every point of its owner cloud (indices 0..N-1)."""
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
        return cls(np.arange(vectors.shape[0]), vectors)

    def __len__(self) -> int:
        return self.indices.shape[0]


def knn_query(cloud: ArrayLike | PointCloud, k: int, *, pad: int = 4) -> NeighborIndex:
    """Exact k nearest neighbours of every point, self excluded.

    A kd-tree proposes ``k + 1 + pad`` candidates per point. Rows whose candidate list
    fully contains the tie group at the k-th distance are resolved vectorised; the
    remaining rows fall back to a ball query at that radius so the result always
    equals an exhaustive scan under the (distance, index) ordering.

    Args:
        cloud: Points to index
        k: Neighbourhood size, 1 <= k < N
        pad: Extra candidates fetched to detect boundary ties

    Returns:
        NeighborIndex with (N, k) indices and distances

    Raises:
        InvalidParameterError: If k is not in [1, N)
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if k < 1 or k >= n:
        raise InvalidParameterError(f"k must satisfy 1 <= k < N (k={k}, N={n})")

    kq = min(k + 1 + pad, n)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=kq)
    dist = np.asarray(dist).reshape(n, kq)
    idx = np.asarray(idx).reshape(n, kq)

    kth = dist[:, k]
    radius = kth * (1.0 + 1e-9) + 1e-12
    rows = np.arange(n)
    if kq == n:
        resolved = np.ones(n, dtype=bool)
    else:
        resolved = dist[:, -1] > radius
    # every resolved row contains itself exactly once
    resolved &= (idx == rows[:, None]).sum(axis=1) == 1

    out_idx = np.empty((n, k), dtype=np.int64)
    out_d2 = np.empty((n, k), dtype=np.float64)

    good = np.flatnonzero(resolved)
    if good.size:
        cand = idx[good]
        cand = cand[cand != good[:, None]].reshape(good.size, kq - 1)
        diff = pts[cand] - pts[good][:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        order = np.lexsort((cand, d2), axis=-1)[:, :k]
        out_idx[good] = np.take_along_axis(cand, order, axis=1)
        out_d2[good] = np.take_along_axis(d2, order, axis=1)

    slow = np.flatnonzero(~resolved)
    if slow.size:
        logger.debug("knn_query: %d row(s) resolved by ball query", slow.size)
        balls = tree.query_ball_point(pts[slow], radius[slow])
        for row, members in zip(slow, balls, strict=True):
            cand = np.asarray([j for j in members if j != row], dtype=np.int64)
            diff = pts[cand] - pts[row]
            d2 = np.einsum("ij,ij->i", diff, diff)
            order = np.lexsort((cand, d2))[:k]
            out_idx[row] = cand[order]
            out_d2[row] = d2[order]

    return NeighborIndex(out_idx, np.sqrt(out_d2))


def farthest_point_sample(
    cloud: ArrayLike | PointCloud, m: int, seed_index: int = 0
) -> np.ndarray:
    """Greedy maximin subsampling.

    Args:
        cloud: Points to sample from
        m: Number of indices to return, 1 <= m <= N
        seed_index: First selected index

    Returns:
        m distinct indices, first is ``seed_index``; ties go to the lowest index
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    if m < 1 or m > n:
        raise InvalidParameterError(f"m must satisfy 1 <= m <= N (m={m}, N={n})")
    if not 0 <= seed_index < n:
        raise InvalidParameterError(f"seed index {seed_index} out of range for N={n}")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    diff = pts - pts[seed_index]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    min_d2[seed_index] = -1.0
    for s in range(1, m):
        nxt = int(np.argmax(min_d2))
        selected[s] = nxt
        diff = pts - pts[nxt]
        np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff), out=min_d2)
        min_d2[selected[: s + 1]] = -1.0
    return selected


def nearest_distances(source: ArrayLike | PointCloud, target: ArrayLike | PointCloud) -> np.ndarray:
    """Distance from every source point to its nearest target point."""
    src = as_points(source)
    dist, _ = cKDTree(as_points(target)).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def hausdorff_distance(a: ArrayLike | PointCloud, b: ArrayLike | PointCloud) -> float:
    """Symmetric Hausdorff distance between two point sets (mm)."""
    return float(max(nearest_distances(a, b).max(), nearest_distances(b, a).max()))


def chamfer_distance(a: ArrayLike | PointCloud, b: ArrayLike | PointCloud) -> float:
    """Chamfer distance with a single 1/|a| prefactor over both directions (mm^2)."""
    pa = as_points(a)
    pb = as_points(b)
    forward = nearest_distances(pa, pb)
    backward = nearest_distances(pb, pa)
    return float((np.sum(forward**2) + np.sum(backward**2)) / pa.shape[0])


def closest_points_on_triangles(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, for arrays that broadcast together.

    Args:
        p: (..., 3) query points
        a, b, c: (..., 3) triangle corners

    Returns:
        (..., 3) closest points, found by Voronoi-region classification
    """
    ab = b - a
    ac = c - a
    bc = c - b

    ap = p - a
    bp = p - b
    cp = p - c
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        result = a + ab * v_in[..., None] + ac * w_in[..., None]

        # edge BC
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        result = np.where(in_bc[..., None], b + bc * w_bc[..., None], result)

        # edge AC
        w_ac = d2 / (d2 - d6)
        in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        result = np.where(in_ac[..., None], a + ac * w_ac[..., None], result)

        # vertex C
        in_c = (d6 >= 0) & (d5 <= d6)
        result = np.where(in_c[..., None], np.broadcast_to(c, result.shape), result)

        # edge AB
        v_ab = d1 / (d1 - d3)
        in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        result = np.where(in_ab[..., None], a + ab * v_ab[..., None], result)

        # vertex B
        in_b = (d3 >= 0) & (d4 <= d3)
        result = np.where(in_b[..., None], np.broadcast_to(b, result.shape), result)

        # vertex A
        in_a = (d1 <= 0) & (d2 <= 0)
        result = np.where(in_a[..., None], np.broadcast_to(a, result.shape), result)

    return result


def mesh_deviations(
    points: ArrayLike | PointCloud, mesh: TriMesh, *, chunk: int = 1024, seeds: int = 8
) -> np.ndarray:
    """Signed distance from each point to the nearest point on ``mesh``.

    The sign is that of dot(p - nearest, normal of the nearest triangle), zero counting as
    positive (outside). Ties between triangles go to the lowest triangle index.

    Candidate triangles come from a KD-tree over centroids. The ``seeds`` nearest
    centroids give an upper bound u on the distance, and every triangle whose centroid
    lies within u plus the largest centroid-to-corner radius is tested exactly, so the
    result equals a scan over all triangles.
    """
    pts = as_points(points)
    a, b, c = mesh.corners
    normals = mesh.normals
    centroids = (a + b + c) / 3.0
    radius = float(np.sqrt(max(((v - centroids) ** 2).sum(axis=1).max() for v in (a, b, c))))
    tree = cKDTree(centroids)
    k = min(seeds, centroids.shape[0])
    out = np.empty(pts.shape[0], dtype=np.float64)
    for start in range(0, pts.shape[0], chunk):
        block = pts[start : start + chunk]
        rows = np.arange(block.shape[0])

        _, seed_tri = tree.query(block, k=k)
        seed_tri = seed_tri.reshape(block.shape[0], k)
        seed_pt = np.repeat(rows, k)
        seed_tri = seed_tri.ravel()
        offset = block[seed_pt] - closest_points_on_triangles(
            block[seed_pt], a[seed_tri], b[seed_tri], c[seed_tri]
        )
        bound = np.sqrt(np.einsum("mk,mk->m", offset, offset).reshape(-1, k).min(axis=1))

        reach = (bound + radius) * (1.0 + 1e-9) + 1e-12
        lists = tree.query_ball_point(block, reach)
        pt = np.repeat(rows, [len(tris) for tris in lists])
        tri = np.fromiter((t for tris in lists for t in tris), dtype=np.int64, count=pt.size)
        offset = block[pt] - closest_points_on_triangles(block[pt], a[tri], b[tri], c[tri])
        dist2 = np.einsum("mk,mk->m", offset, offset)

        # per point: smallest distance, then lowest triangle index
        order = np.lexsort((tri, dist2, pt))
        _, first = np.unique(pt[order], return_index=True)
        best = order[first]
        best_tri = tri[best]
        side = np.where(np.einsum("pk,pk->p", offset[best], normals[best_tri]) < 0, -1.0, 1.0)
        out[start : start + chunk] = side * np.sqrt(dist2[best])
    return out


def point_to_mesh_deviation(p: ArrayLike, mesh: TriMesh) -> float:
    """Signed distance (mm) from one point to ``mesh``, positive outward."""
    return float(mesh_deviations(as_points(p), mesh)[0])
