"""Pipeline stages of the facial displacement toolkit."""

from .cases import SurgicalCase
from .evaluation import EvalReport, evaluate_case, summarize_reports
from .geometry import (
    DisplacementField,
    LabeledCloud,
    NeighborIndex,
    PointCloud,
    SourceLabel,
    TriMesh,
    chamfer_distance,
    farthest_point_sample,
    hausdorff_distance,
    knn_query,
    point_to_mesh_deviation,
)
from .manifold import build_enhanced_manifold, fuse_subclouds, partition_subclouds
from .network import NetworkParams, forward_predict
from .reconstruction import (
    DeformationGraph,
    LaplacianSolveReport,
    build_deformation_graph,
    direct_solve_oracle,
    reconstruct_dense,
)
from .registration import RigidTransform, icp_refine, landmark_rigid_init
from .synthetic import SyntheticCase, generate_anatomy, generate_dataset
from .training import kfold_split, train

__all__ = [
    "DeformationGraph",
    "DisplacementField",
    "EvalReport",
    "LabeledCloud",
    "LaplacianSolveReport",
    "NeighborIndex",
    "NetworkParams",
    "PointCloud",
    "RigidTransform",
    "SourceLabel",
    "SurgicalCase",
    "SyntheticCase",
    "TriMesh",
    "build_deformation_graph",
    "build_enhanced_manifold",
    "chamfer_distance",
    "direct_solve_oracle",
    "evaluate_case",
    "farthest_point_sample",
    "forward_predict",
    "fuse_subclouds",
    "generate_anatomy",
    "generate_dataset",
    "hausdorff_distance",
    "icp_refine",
    "kfold_split",
    "knn_query",
    "landmark_rigid_init",
    "partition_subclouds",
    "point_to_mesh_deviation",
    "reconstruct_dense",
    "summarize_reports",
    "train",
]
