"""Case-level accuracy metrics and cohort summaries."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from ..errors import InvalidParameterError
from .geometry import PointCloud, TriMesh, as_points, hausdorff_distance, mesh_deviations

logger = logging.getLogger(__name__)

# Both 2 mm and 4 mm fall in the middle bucket
BUCKET_LOW = 2.0
BUCKET_HIGH = 4.0
SUMMARY_METRICS = (
    "hausdorff",
    "surface_deviation",
    "landmark_mean",
    "pct_lt2",
    "pct_2to4",
    "pct_gt4",
)


def bucket_fractions(errors: ArrayLike) -> tuple[float, float, float]:
    """Fractions of errors in [0, 2), [2, 4] and (4, inf) mm."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        raise InvalidParameterError("no errors to bucket")
    low = int(np.count_nonzero(e < BUCKET_LOW))
    high = int(np.count_nonzero(e > BUCKET_HIGH))
    mid = e.size - low - high
    return low / e.size, mid / e.size, high / e.size


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one predicted face against its ground truth.

    Attributes:
        case_id: Case identifier
        hausdorff: Symmetric Hausdorff distance between the clouds (mm)
        surface_deviation: Mean unsigned vertex-to-surface deviation (mm)
        surface_deviation_sd: Standard deviation of the unsigned deviations
        landmark_errors: Per-landmark Euclidean error (mm)
        landmark_mean: Mean landmark error
        landmark_sd: Standard deviation of the landmark errors
        buckets: Landmark fractions below 2 mm, within 2..4 mm and above 4 mm
        signed_deviations: Per-vertex signed deviation, for heatmaps only
        landmark_regions: Region tag per landmark, if known
        region_errors: Mean landmark error per region
        subcloud_hausdorff: Hausdorff distance of each sparse sub-cloud prediction
    """

    case_id: str
    hausdorff: float
    surface_deviation: float
    surface_deviation_sd: float
    landmark_errors: np.ndarray
    landmark_mean: float
    landmark_sd: float
    buckets: tuple[float, float, float]
    signed_deviations: np.ndarray = field(repr=False)
    landmark_regions: tuple[str, ...] = ()
    region_errors: dict[str, float] = field(default_factory=dict)
    subcloud_hausdorff: tuple[float, ...] = ()

    def scalars(self) -> dict[str, float]:
        return {
            "hausdorff": self.hausdorff,
            "surface_deviation": self.surface_deviation,
            "landmark_mean": self.landmark_mean,
            "pct_lt2": self.buckets[0],
            "pct_2to4": self.buckets[1],
            "pct_gt4": self.buckets[2],
        }


def _vertices(shape: TriMesh | PointCloud | ArrayLike) -> np.ndarray:
    if isinstance(shape, TriMesh):
        return shape.vertices.points
    return as_points(shape)


def evaluate_case(
    predicted: TriMesh | PointCloud | ArrayLike,
    truth: TriMesh,
    landmarks: ArrayLike,
    *,
    case_id: str = "case",
    landmark_regions: Sequence[str] = (),
    subclouds: Sequence[ArrayLike] = (),
) -> EvalReport:
    """Score a predicted post-op face against the true one.

    Args:
        predicted: Predicted face vertices (mesh or cloud), pointwise aligned with truth
        truth: True post-op face mesh
        landmarks: Landmark vertex indices valid in both
        case_id: Identifier carried into the report
        landmark_regions: Optional region tag per landmark
        subclouds: Optional face index sets of the sparse sub-clouds

    Raises:
        InvalidParameterError: Mismatched clouds, no landmarks or an invalid index
    """
    pred = _vertices(predicted)
    true = truth.vertices.points
    if pred.shape != true.shape:
        raise InvalidParameterError(
            f"predicted cloud has {pred.shape[0]} points, truth has {true.shape[0]}"
        )
    lm = np.asarray(landmarks, dtype=np.int64).reshape(-1)
    if lm.size == 0:
        raise InvalidParameterError("at least one landmark is required")
    if lm.min() < 0 or lm.max() >= true.shape[0]:
        raise InvalidParameterError("landmark index outside the face cloud")
    regions = tuple(landmark_regions)
    if regions and len(regions) != lm.size:
        raise InvalidParameterError("one region tag is needed per landmark")

    signed = mesh_deviations(pred, truth)
    unsigned = np.abs(signed)
    errors = np.linalg.norm(pred[lm] - true[lm], axis=1)

    region_errors = {}
    for region in dict.fromkeys(regions):
        mask = np.asarray([r == region for r in regions])
        region_errors[region] = float(errors[mask].mean())

    sub_h = tuple(hausdorff_distance(pred[idx], true[idx]) for idx in subclouds)

    report = EvalReport(
        case_id=case_id,
        hausdorff=hausdorff_distance(pred, true),
        surface_deviation=float(unsigned.mean()),
        surface_deviation_sd=float(unsigned.std()),
        landmark_errors=errors,
        landmark_mean=float(errors.mean()),
        landmark_sd=float(errors.std()),
        buckets=bucket_fractions(errors),
        signed_deviations=signed,
        landmark_regions=regions,
        region_errors=region_errors,
        subcloud_hausdorff=sub_h,
    )
    logger.info(
        "%s: Hausdorff %.3f mm, surface %.3f mm, landmarks %.3f +/- %.3f mm",
        case_id, report.hausdorff, report.surface_deviation, report.landmark_mean,
        report.landmark_sd,
    )
    return report


def summarize_reports(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float, int]]:
    """Mean and sample standard deviation of every scalar metric over the cases."""
    if not reports:
        raise InvalidParameterError("no reports to summarise")
    table = {}
    for name in SUMMARY_METRICS:
        values = np.asarray([r.scalars()[name] for r in reports])
        sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
        table[name] = (float(values.mean()), sd, int(values.size))
    return table
