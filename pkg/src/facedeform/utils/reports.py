"""CSV and JSON writers for loss logs, evaluation metrics and solver reports.

Writers take plain records (dataclasses or mappings) so this module stays free of
pipeline imports.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "L_total", "L_CD", "L_smooth", "L_prog")
METRIC_COLUMNS = (
    "case_id",
    "hausdorff_mm",
    "surface_dev_mm",
    "landmark_mean_mm",
    "pct_lt2",
    "pct_2to4",
    "pct_gt4",
)
LANDMARK_COLUMNS = ("case_id", "landmark", "region", "error_mm")
SUMMARY_COLUMNS = ("metric", "mean", "sd", "cases")

FLOAT_FORMAT = "{:.9g}"


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    return str(value)


def _write_rows(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
            count += 1
    logger.debug("Wrote %d row(s) to %s", count, path)
    return path


def write_loss_log(rows: Iterable, path: str | Path) -> Path:
    """One line per epoch: epoch, L_total, L_CD, L_smooth, L_prog."""
    return _write_rows(
        path,
        LOSS_COLUMNS,
        ((r.epoch, r.total, r.chamfer, r.smooth, r.progressive) for r in rows),
    )


def read_loss_log(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_metrics_csv(reports: Iterable, path: str | Path) -> Path:
    """Case-level metrics, rows ordered by case id; bucket columns hold fractions."""
    ordered = sorted(reports, key=lambda r: r.case_id)
    return _write_rows(
        path,
        METRIC_COLUMNS,
        (
            (
                r.case_id,
                r.hausdorff,
                r.surface_deviation,
                r.landmark_mean,
                *r.buckets,
            )
            for r in ordered
        ),
    )


def write_landmark_csv(reports: Iterable, path: str | Path) -> Path:
    def rows():
        for r in sorted(reports, key=lambda r: r.case_id):
            regions = r.landmark_regions or ("",) * len(r.landmark_errors)
            for i, (err, region) in enumerate(zip(r.landmark_errors, regions, strict=True)):
                yield r.case_id, i, region, float(err)

    return _write_rows(path, LANDMARK_COLUMNS, rows())


def write_summary_csv(summary: Mapping[str, tuple[float, float, int]], path: str | Path) -> Path:
    """``metric -> (mean, sd, case count)`` as one row per metric."""
    return _write_rows(
        path, SUMMARY_COLUMNS, ((name, *values) for name, values in summary.items())
    )


def _jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return _jsonable(asdict(value))
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def write_json(payload: Any, path: str | Path) -> Path:
    """Write a dataclass or mapping as indented JSON (arrays become lists).

    Raises:
        ValueError: If the payload holds NaN or an infinity, which JSON cannot encode
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", "utf-8")
    return path
