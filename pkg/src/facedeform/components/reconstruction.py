"""Dense reconstruction: deformation graph, constrained graph Laplacian and Jacobi relaxation.

The sparse network prediction fixes displacements on a subset S of the dense face.
Every other node receives the constrained-harmonic interpolation, i.e. the solution of
L_G delta = 0 on free rows with delta|_S = delta_fix, found by Jacobi iteration.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from ..errors import GraphConnectivityError, InternalConsistencyError, InvalidParameterError
from .geometry import DisplacementField, NeighborIndex, PointCloud, as_points, knn_query
from .synthetic import (
    apply_surgical_plan,
    generate_anatomy,
    oracle_face_displacement,
    random_plan,
)

logger = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 2000
BENCHMARK_BONE_POINTS = 1200
BENCHMARK_MAGNITUDE = 10.0
CUBE_EXTENT = 100.0
_TINY = np.finfo(np.float64).tiny


def gaussian_weights(distances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """omega_ij = exp(-d_ij^2 / (2 sigma_i^2)) with sigma_i the row mean distance.

    A row whose neighbours all coincide with it has sigma_i = 0 and gets weight 1.
    Weights are clipped below at the smallest normal float so they stay in (0, 1].

    Returns:
        (weights (N, k), sigma (N,))
    """
    sigma = distances.mean(axis=1)
    safe = np.where(sigma > 0, sigma, 1.0)
    w = np.exp(-(distances**2) / (2.0 * safe[:, None] ** 2))
    w = np.where(sigma[:, None] > 0, w, 1.0)
    return np.clip(w, _TINY, 1.0), sigma


@dataclass(frozen=True)
class DeformationGraph:
    """Weighted directed graph over the dense face with Dirichlet constraints.

    Attributes:
        nodes: (N, 3) node positions
        weights: (N, N) CSR matrix; row i holds omega_ij for j in N(i), no diagonal
        constrained: Sorted indices of S
        fixed: (|S|, 3) delta_fix aligned with ``constrained``
        sigma: (N,) kernel width per node
        neighbors: KNN lists the weights were built from, if any
        kernel: ``position`` or ``displacement`` (weights rebuilt from the iterate)
    """

    nodes: np.ndarray
    weights: sparse.csr_matrix
    constrained: np.ndarray
    fixed: np.ndarray
    sigma: np.ndarray | None = None
    neighbors: NeighborIndex | None = None
    kernel: str = "position"
    degree: np.ndarray = field(init=False, repr=False)
    free: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.nodes.shape[0]
        w = sparse.csr_matrix(self.weights, dtype=np.float64)
        if w.shape != (n, n):
            raise InvalidParameterError(f"weight matrix shape {w.shape} for {n} nodes")
        w.eliminate_zeros()
        if w.diagonal().any():
            raise InvalidParameterError("deformation graph must not contain self-edges")
        if w.nnz and (w.data.min() <= 0 or w.data.max() > 1):
            raise InvalidParameterError("edge weights must lie in (0, 1]")
        idx = np.asarray(self.constrained, dtype=np.int64).reshape(-1)
        fixed = np.asarray(self.fixed, dtype=np.float64).reshape(-1, 3)
        if idx.size == 0:
            raise InvalidParameterError("the constrained set S is empty")
        if fixed.shape[0] != idx.size:
            raise InvalidParameterError(f"{fixed.shape[0]} fixed values for {idx.size} indices")
        if idx.min() < 0 or idx.max() >= n:
            raise InvalidParameterError("constrained index outside the dense cloud")
        order = np.argsort(idx, kind="stable")
        idx, fixed = idx[order], fixed[order]
        if np.any(np.diff(idx) == 0):
            raise InvalidParameterError("constrained indices must be distinct")
        if not np.all(np.isfinite(fixed)):
            raise InvalidParameterError("fixed displacements must be finite")
        if self.kernel not in ("position", "displacement"):
            raise InvalidParameterError(f"unknown kernel {self.kernel!r}")

        free = np.ones(n, dtype=bool)
        free[idx] = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "constrained", idx)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "degree", np.asarray(w.sum(axis=1)).ravel())
        object.__setattr__(self, "free", free)
        _check_reaches_constraints(w, idx)

    @classmethod
    def from_weights(
        cls,
        nodes: ArrayLike,
        weights,
        constrained: ArrayLike,
        fixed: ArrayLike,
        *,
        symmetrize: bool = False,
    ) -> DeformationGraph:
        """Graph from an explicit weight matrix (dense array or scipy sparse)."""
        w = sparse.csr_matrix(weights, dtype=np.float64)
        if symmetrize:
            w = ((w + w.T) * 0.5).tocsr()
        return cls(as_points(nodes), w, constrained, fixed)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def reweighted(self, weights: sparse.csr_matrix) -> DeformationGraph:
        return DeformationGraph(
            self.nodes, weights, self.constrained, self.fixed, self.sigma, self.neighbors,
            self.kernel,
        )


def _check_reaches_constraints(w: sparse.csr_matrix, constrained: np.ndarray) -> None:
    """Every free node must have a directed path i -> ... -> s for some s in S."""
    n = w.shape[0]
    # reverse edges, plus a virtual root n pointing at every constrained node
    rows = np.concatenate([w.indices, np.full(constrained.size, n)])
    cols = np.concatenate([np.repeat(np.arange(n), np.diff(w.indptr)), constrained])
    reverse = sparse.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(n + 1, n + 1)
    )
    reached = csgraph.breadth_first_order(reverse, n, directed=True, return_predecessors=False)
    if reached.size < n + 1:
        mask = np.ones(n, dtype=bool)
        mask[reached[reached < n]] = False
        missing = np.flatnonzero(mask)
        raise GraphConnectivityError(
            f"{missing.size} node(s) have no path to a constrained node (first: {missing[0]})"
        )


def build_deformation_graph(
    dense_face: ArrayLike | PointCloud,
    sparse_indices: ArrayLike,
    fixed: ArrayLike | DisplacementField,
    k_rec: int,
    *,
    symmetrize: bool = False,
    kernel: str = "position",
) -> DeformationGraph:
    """KNN deformation graph with Gaussian edge weights over node positions.

    Args:
        dense_face: (N, 3) dense face vertices
        sparse_indices: Indices of S in the dense cloud
        fixed: delta_fix aligned with ``sparse_indices`` (array or field)
        k_rec: Neighbourhood size
        symmetrize: Replace omega by (omega + omega^T) / 2
        kernel: ``displacement`` re-weights from the current iterate during the solve

    Raises:
        InvalidParameterError: Empty S, bad indices or k_rec out of range
        GraphConnectivityError: A free node cannot reach S
    """
    pts = as_points(dense_face)
    values = fixed.vectors if isinstance(fixed, DisplacementField) else fixed
    nbrs = knn_query(pts, k_rec)
    w, sigma = gaussian_weights(nbrs.distances)
    n = pts.shape[0]
    matrix = sparse.csr_matrix(
        (w.ravel(), nbrs.indices.ravel(), np.arange(0, n * k_rec + 1, k_rec)), shape=(n, n)
    )
    if symmetrize:
        matrix = ((matrix + matrix.T) * 0.5).tocsr()
    graph = DeformationGraph(pts, matrix, sparse_indices, values, sigma, nbrs, kernel)
    logger.debug(
        "Deformation graph: %d nodes, k_rec=%d, |S|=%d", n, k_rec, graph.constrained.size
    )
    return graph


def laplacian_matrix(graph: DeformationGraph) -> sparse.csr_matrix:
    """L_G = diag(row sums of omega) - omega."""
    return (sparse.diags(graph.degree) - graph.weights).tocsr()


def laplacian_apply(graph: DeformationGraph, delta):
    """(L_G delta)_i = (sum_k omega_ik) delta_i - sum_j omega_ij delta_j.

    Accepts a DisplacementField over all nodes or a raw (N,) / (N, 3) array and
    returns the same kind.
    """
    values = delta.vectors if isinstance(delta, DisplacementField) else np.asarray(delta, float)
    if values.shape[0] != len(graph):
        raise InvalidParameterError(f"field has {values.shape[0]} rows for {len(graph)} nodes")
    deg = graph.degree if values.ndim == 1 else graph.degree[:, None]
    out = deg * values - graph.weights @ values
    return DisplacementField.dense(out) if isinstance(delta, DisplacementField) else out


def _values(graph: DeformationGraph, delta) -> np.ndarray:
    values = delta.vectors if isinstance(delta, DisplacementField) else delta
    values = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if values.shape[0] != len(graph):
        raise InvalidParameterError(f"field has {values.shape[0]} rows for {len(graph)} nodes")
    return values


def jacobi_initialize(graph: DeformationGraph) -> np.ndarray:
    """Neighbourhood-average initial guess, swept breadth-first outward from S.

    Constrained nodes take delta_fix. Each later layer holds the free nodes with at
    least one already-assigned neighbour and takes the omega-weighted mean of those
    neighbours; the first layer therefore averages constrained neighbours only.

    Returns:
        (N, 3) initial field
    """
    n = len(graph)
    values = np.zeros((n, 3), dtype=np.float64)
    values[graph.constrained] = graph.fixed
    assigned = ~graph.free
    w = graph.weights
    layers = 0
    while not assigned.all():
        reach = w @ assigned.astype(np.float64)
        frontier = np.flatnonzero(~assigned & (reach > 0))
        if frontier.size == 0:
            raise InternalConsistencyError("initial sweep stalled before reaching every node")
        rows = w[frontier]
        values[frontier] = (rows @ (values * assigned[:, None])) / reach[frontier, None]
        assigned[frontier] = True
        layers += 1
    logger.debug("Initial sweep assigned every node in %d layer(s)", layers)
    return values


def jacobi_iterate(graph: DeformationGraph, delta) -> np.ndarray:
    """One Jacobi sweep: free nodes take the omega-weighted mean of their neighbours.

    Reads only ``delta`` and writes a new array; constrained rows keep delta_fix.
    """
    current = _values(graph, delta).copy()
    current[graph.constrained] = graph.fixed
    if np.any(graph.degree[graph.free] <= 0):
        raise GraphConnectivityError("a free node has no weighted neighbours")
    nxt = current.copy()
    free = graph.free
    nxt[free] = (graph.weights @ current)[free] / graph.degree[free, None]
    return nxt


def displacement_kernel_weights(graph: DeformationGraph, delta: np.ndarray) -> sparse.csr_matrix:
    """Weights from displacement similarity, omega_ij = exp(-|d_i - d_j|^2 / (2 sigma_i^2))."""
    w = graph.weights
    rows = np.repeat(np.arange(len(graph)), np.diff(w.indptr))
    diffs = np.linalg.norm(delta[rows] - delta[w.indices], axis=1)
    counts = np.maximum(np.diff(w.indptr), 1)
    sigma = np.bincount(rows, weights=diffs, minlength=len(graph)) / counts
    safe = np.where(sigma > 0, sigma, 1.0)[rows]
    data = np.where(sigma[rows] > 0, np.exp(-(diffs**2) / (2.0 * safe**2)), 1.0)
    return sparse.csr_matrix((np.clip(data, _TINY, 1.0), w.indices, w.indptr), shape=w.shape)


@dataclass(frozen=True)
class LaplacianSolveReport:
    """Iteration count, final max per-node update (mm) and convergence of a solve."""

    iterations: int
    residual: float
    converged: bool
    elapsed_s: float = 0.0
    residual_history: tuple[float, ...] = ()


def reconstruct_dense(
    graph: DeformationGraph, tol: float = 1e-4, max_iters: int = 200
) -> tuple[DisplacementField, LaplacianSolveReport]:
    """Initialise, then iterate until the largest per-node update falls below ``tol``.

    Non-convergence is not an error: the report carries ``converged=False`` and the
    caller decides. The reported residual is always finite; with ``max_iters=0`` it is
    the update the first sweep would apply to the initial guess.
    """
    if tol <= 0 or max_iters < 0:
        raise InvalidParameterError("tol must be positive and max_iters non-negative")
    start = time.perf_counter()
    delta = jacobi_initialize(graph)
    history: list[float] = []
    residual = 0.0
    converged = False
    if max_iters == 0:
        # no sweeps allowed: report the update the first sweep would make
        residual = float(np.linalg.norm(jacobi_iterate(graph, delta) - delta, axis=1).max())
        converged = residual < tol
    for _ in range(max_iters):
        if graph.kernel == "displacement":
            graph = graph.reweighted(displacement_kernel_weights(graph, delta))
        nxt = jacobi_iterate(graph, delta)
        residual = float(np.linalg.norm(nxt - delta, axis=1).max())
        history.append(residual)
        delta = nxt
        if residual < tol:
            converged = True
            break
    delta[graph.constrained] = graph.fixed
    report = LaplacianSolveReport(
        iterations=len(history),
        residual=residual,
        converged=converged,
        elapsed_s=time.perf_counter() - start,
        residual_history=tuple(history),
    )
    if converged:
        logger.info(
            "Jacobi solve converged in %d iteration(s), residual %.3g mm",
            report.iterations, report.residual,
        )
    else:
        logger.warning(
            "Jacobi solve stopped at %d iteration(s) without converging (residual %.3g mm)",
            report.iterations, report.residual,
        )
    return DisplacementField.dense(delta), report


def _dirichlet_blocks(graph: DeformationGraph):
    lap = laplacian_matrix(graph)
    free = np.flatnonzero(graph.free)
    return lap[free][:, free], -(lap[free][:, graph.constrained] @ graph.fixed), free


def direct_solve_oracle(graph: DeformationGraph) -> DisplacementField:
    """Exact constrained-harmonic field by dense factorisation (small graphs only).

    Raises:
        InvalidParameterError: More than 2000 nodes
        InternalConsistencyError: The free block is singular
    """
    if len(graph) > DIRECT_SOLVE_LIMIT:
        raise InvalidParameterError(
            f"direct solve is limited to {DIRECT_SOLVE_LIMIT} nodes, graph has {len(graph)}"
        )
    values = np.zeros((len(graph), 3))
    values[graph.constrained] = graph.fixed
    a, rhs, free = _dirichlet_blocks(graph)
    if free.size:
        try:
            values[free] = scipy.linalg.solve(a.toarray(), rhs, check_finite=True)
        except (scipy.linalg.LinAlgError, ValueError) as e:
            raise InternalConsistencyError(f"constrained Laplacian is singular: {e}") from e
    return DisplacementField.dense(values)


def sparse_direct_solve(graph: DeformationGraph) -> np.ndarray:
    """Reference solution of the constrained system by sparse LU, for any graph size."""
    values = np.zeros((len(graph), 3))
    values[graph.constrained] = graph.fixed
    a, rhs, free = _dirichlet_blocks(graph)
    if free.size:
        values[free] = np.asarray(spsolve(a.tocsc(), rhs)).reshape(-1, 3)
    if not np.all(np.isfinite(values)):
        raise InternalConsistencyError("sparse solve produced non-finite values")
    return values


def five_iteration_gap(graph: DeformationGraph, iterations: int = 5) -> float:
    """Largest component difference between the ``iterations``-th iterate and the exact solve."""
    delta = jacobi_initialize(graph)
    for _ in range(iterations):
        delta = jacobi_iterate(graph, delta)
    return float(np.abs(delta - sparse_direct_solve(graph)).max())


def _face_benchmark(
    n: int, seed: int, rng: np.random.Generator, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    anatomy = generate_anatomy(seed, BENCHMARK_BONE_POINTS, n)
    bone = anatomy.bone.points
    plan = random_plan(bone, anatomy.segments, rng)
    moved = apply_surgical_plan(anatomy.bone, plan).points
    pts = anatomy.face.points[:n]
    return pts, oracle_face_displacement(pts, bone, moved - bone, tau).vectors


def benchmark_graph(
    n: int,
    k_rec: int = 10,
    constrained_fraction: float = 0.05,
    seed: int = 0,
    surface: str = "face",
    tau: float = 15.0,
) -> DeformationGraph:
    """Deformation graph with a random constrained subset and a field of at most 10 mm.

    ``surface="face"`` samples ``n`` vertices of a synthetic face and fixes the soft-tissue
    response to a random surgical plan. ``surface="cube"`` scatters points through a
    100 mm cube with a smooth sinusoidal field; it works for any ``n`` and is the harder
    case for the iteration, since the graph is volumetric.

    Raises:
        InvalidParameterError: Unknown surface, or fewer than 100 nodes for ``face``
    """
    rng = np.random.default_rng(seed)
    if surface == "face":
        pts, values = _face_benchmark(n, seed, rng, tau)
    elif surface == "cube":
        pts = rng.uniform(0.0, CUBE_EXTENT, size=(n, 3))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        values = BENCHMARK_MAGNITUDE / np.sqrt(3) * np.sin(pts / CUBE_EXTENT * np.pi + phase)
    else:
        raise InvalidParameterError(f"unknown benchmark surface {surface!r}")
    n_fixed = max(1, int(round(constrained_fraction * n)))
    constrained = rng.choice(n, size=n_fixed, replace=False)
    return build_deformation_graph(pts, constrained, values[constrained], k_rec)


@dataclass(frozen=True)
class BenchmarkRow:
    nodes: int
    k_rec: int
    seconds_per_iteration: float


def benchmark_jacobi(
    sizes: tuple[int, ...] = (100_000, 200_000),
    k_rec: int = 10,
    trials: int = 5,
    iterations: int = 3,
    seed: int = 0,
) -> list[BenchmarkRow]:
    """Median wall time of one Jacobi sweep per graph size (graph build excluded)."""
    rows = []
    for n in sizes:
        graph = benchmark_graph(n, k_rec, seed=seed)
        delta = jacobi_initialize(graph)
        samples = []
        for _ in range(trials):
            start = time.perf_counter()
            for _ in range(iterations):
                delta = jacobi_iterate(graph, delta)
            samples.append((time.perf_counter() - start) / iterations)
        rows.append(BenchmarkRow(n, k_rec, float(np.median(samples))))
        logger.info("N=%d k_rec=%d: %.3g s per iteration", n, k_rec, rows[-1].seconds_per_iteration)
    return rows
