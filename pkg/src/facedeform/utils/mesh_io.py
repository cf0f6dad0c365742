"""ASCII PLY and OBJ readers/writers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from ..components.geometry import LabeledCloud, PointCloud, SourceLabel, TriMesh
from ..errors import InvalidParameterError, ParseError, UnsupportedFaceError
from .heatmap import deviation_colors

logger = logging.getLogger(__name__)

# Coordinates are printed with 9 significant digits
COORD_FORMAT = "{:.9g}"

_FLOAT_TYPES = {"float", "float32", "float64", "double"}
_INT_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint",
    "int8", "uint8", "int16", "uint16", "int32", "uint32",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    properties: list[tuple[str, str]] = field(default_factory=list)
    is_list: bool = False


@dataclass
class PlyTable:
    """Parsed contents of an ASCII PLY file.

    Attributes:
        vertex: Column arrays of the vertex element keyed by property name
        vertex_lines: 1-based source line of each vertex row
        faces: (F, 3) triangle indices if a face element was present
    """

    vertex: dict[str, np.ndarray]
    vertex_lines: np.ndarray
    faces: np.ndarray | None = None


def _parse_number(token: str, kind: str, path: Path, line: int) -> float | int:
    try:
        return int(token) if kind in _INT_TYPES else float(token)
    except ValueError as e:
        raise ParseError(f"non-numeric token {token!r}", path=path, line=line) from e


def read_ply_table(path: str | Path) -> PlyTable:
    """Parse an ASCII PLY file into columns.

    Args:
        path: File to read

    Returns:
        The vertex columns, their line numbers and optional triangle faces

    Raises:
        ParseError: Malformed header, count mismatch or non-numeric token
    """
    path = Path(path)
    with path.open("r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path=path, line=1)

    elements: list[_PlyElement] = []
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        keyword = tokens[0]
        if keyword == "format":
            if len(tokens) != 3 or tokens[1] != "ascii":
                raise ParseError("only 'format ascii 1.0' is supported", path=path, line=lineno)
        elif keyword == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", path=path, line=lineno)
            try:
                count = int(tokens[2])
            except ValueError as e:
                raise ParseError(f"bad element count {tokens[2]!r}", path=path, line=lineno) from e
            elements.append(_PlyElement(tokens[1], count))
        elif keyword == "property":
            if not elements:
                raise ParseError("property before any element", path=path, line=lineno)
            current = elements[-1]
            if len(tokens) == 5 and tokens[1] == "list":
                current.is_list = True
                current.properties.append((tokens[4], tokens[3]))
            elif len(tokens) == 3 and (tokens[1] in _FLOAT_TYPES or tokens[1] in _INT_TYPES):
                current.properties.append((tokens[2], tokens[1]))
            else:
                raise ParseError("malformed property line", path=path, line=lineno)
        elif keyword == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(f"unknown header keyword {keyword!r}", path=path, line=lineno)

    if body_start is None:
        raise ParseError("missing end_header", path=path)

    # Body rows, skipping blank lines
    rows = [
        (lineno, raw.split())
        for lineno, raw in enumerate(lines[body_start:], start=body_start + 1)
        if raw.strip()
    ]
    cursor = 0
    vertex: dict[str, np.ndarray] = {}
    vertex_lines = np.zeros(0, dtype=np.int64)
    faces: np.ndarray | None = None

    for element in elements:
        if cursor + element.count > len(rows):
            raise ParseError(
                f"expected {element.count} {element.name} rows, found {len(rows) - cursor}",
                path=path,
            )
        block = rows[cursor : cursor + element.count]
        cursor += element.count

        if element.name == "vertex":
            if element.is_list:
                raise ParseError("list properties on vertices are not supported", path=path)
            columns: dict[str, list[float | int]] = {name: [] for name, _ in element.properties}
            for lineno, tokens in block:
                if len(tokens) != len(element.properties):
                    raise ParseError(
                        f"expected {len(element.properties)} values, found {len(tokens)}",
                        path=path,
                        line=lineno,
                    )
                for (name, kind), token in zip(element.properties, tokens, strict=True):
                    columns[name].append(_parse_number(token, kind, path, lineno))
            vertex = {
                name: np.asarray(values, dtype=np.int64 if kind in _INT_TYPES else np.float64)
                for (name, kind), values in zip(element.properties, columns.values(), strict=True)
            }
            vertex_lines = np.asarray([lineno for lineno, _ in block], dtype=np.int64)
        elif element.name == "face":
            tris = []
            for lineno, tokens in block:
                values = [_parse_number(t, "int", path, lineno) for t in tokens]
                if not values or values[0] != 3 or len(values) != 4:
                    raise ParseError("only triangle faces are supported", path=path, line=lineno)
                tris.append(values[1:])
            faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
        else:
            logger.debug("Skipping PLY element %r (%d rows)", element.name, element.count)

    if cursor != len(rows):
        raise ParseError("unexpected data after the last element", path=path, line=rows[cursor][0])

    return PlyTable(vertex=vertex, vertex_lines=vertex_lines, faces=faces)


def _require_xyz(table: PlyTable, path: Path) -> np.ndarray:
    missing = [axis for axis in ("x", "y", "z") if axis not in table.vertex]
    if missing:
        raise ParseError(f"vertex element lacks properties {missing}", path=path)
    return np.column_stack([table.vertex["x"], table.vertex["y"], table.vertex["z"]])


def read_ply(
    path: str | Path, default_label: SourceLabel = SourceLabel.FACE_PRE
) -> LabeledCloud:
    """Read a labeled point cloud.

    Args:
        path: ASCII PLY with x, y, z and an optional integer ``label`` property
        default_label: Label given to every point when the file has no label column

    Raises:
        ParseError: On any format violation, including a label outside 0..2
    """
    path = Path(path)
    table = read_ply_table(path)
    points = _require_xyz(table, path)
    if "label" in table.vertex:
        labels = table.vertex["label"].astype(np.int64)
        bad = np.flatnonzero((labels < 0) | (labels >= len(SourceLabel)))
        if bad.size:
            raise ParseError(
                "label out of range", path=path, line=int(table.vertex_lines[bad[0]])
            )
    else:
        labels = np.full(points.shape[0], int(default_label), dtype=np.int64)
    return LabeledCloud(PointCloud(points), labels)


def _write_lines(path: Path, header: list[str], rows: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(header))
        fh.write("\n")
        if rows:
            fh.write("\n".join(rows))
            fh.write("\n")


def _format_xyz(points: np.ndarray) -> list[str]:
    return [" ".join(COORD_FORMAT.format(v) for v in row) for row in points.tolist()]


def write_ply(cloud: LabeledCloud, path: str | Path) -> None:
    """Write a labeled point cloud as ASCII PLY (x, y, z, label)."""
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar label",
        "end_header",
    ]
    coords = _format_xyz(cloud.points)
    rows = [f"{xyz} {label}" for xyz, label in zip(coords, cloud.labels.tolist(), strict=True)]
    _write_lines(Path(path), header, rows)


def write_indexed_ply(indices: ArrayLike, points: ArrayLike, path: str | Path) -> None:
    """Write points tagged with the index of the dense point they belong to."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if indices.shape[0] != points.shape[0]:
        raise InvalidParameterError(f"{indices.shape[0]} indices for {points.shape[0]} points")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property double x",
        "property double y",
        "property double z",
        "property int index",
        "end_header",
    ]
    coords = _format_xyz(points)
    rows = [f"{xyz} {i}" for xyz, i in zip(coords, indices.tolist(), strict=True)]
    _write_lines(Path(path), header, rows)


def read_indexed_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a file written by :func:`write_indexed_ply`.

    Returns:
        (indices, points) with shapes (M,) and (M, 3)
    """
    path = Path(path)
    table = read_ply_table(path)
    points = _require_xyz(table, path)
    if "index" not in table.vertex:
        raise ParseError("vertex element lacks an 'index' property", path=path)
    return table.vertex["index"].astype(np.int64), points


def write_heatmap_ply(mesh: TriMesh, deviations: ArrayLike, path: str | Path) -> None:
    """Write ``mesh`` with vertex colours mapped from signed deviations (mm).

    Raises:
        InvalidParameterError: If there is not one deviation per vertex
    """
    deviations = np.asarray(deviations, dtype=np.float64).reshape(-1)
    n = len(mesh.vertices)
    if deviations.shape[0] != n:
        raise InvalidParameterError(f"{deviations.shape[0]} deviations for {n} vertices")
    colors = deviation_colors(deviations)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {mesh.triangles.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    coords = _format_xyz(mesh.vertices.points)
    rows = [
        f"{xyz} {r} {g} {b}"
        for xyz, (r, g, b) in zip(coords, colors.tolist(), strict=True)
    ]
    rows += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    _write_lines(Path(path), header, rows)


def read_obj(path: str | Path) -> TriMesh:
    """Read a triangle mesh from ASCII OBJ (``v`` and ``f`` records, 1-based).

    Raises:
        UnsupportedFaceError: For faces with other than three corners
        ParseError: For bad indices, non-numeric tokens or other record types
        MeshConstructionError: For degenerate triangles
    """
    path = Path(path)
    vertices: list[list[float]] = []
    triangles: list[list[int]] = []
    with path.open("r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            record = tokens[0]
            if record == "v":
                if len(tokens) < 4:
                    raise ParseError("vertex needs three coordinates", path=path, line=lineno)
                vertices.append(
                    [float(_parse_number(t, "double", path, lineno)) for t in tokens[1:4]]
                )
            elif record == "f":
                corners = tokens[1:]
                if len(corners) != 3:
                    raise UnsupportedFaceError(
                        f"face with {len(corners)} corners", path=path, line=lineno
                    )
                face = []
                for corner in corners:
                    index = int(_parse_number(corner.split("/")[0], "int", path, lineno))
                    if index < 1 or index > len(vertices):
                        raise ParseError(
                            f"face index {index} outside 1..{len(vertices)}",
                            path=path,
                            line=lineno,
                        )
                    face.append(index - 1)
                triangles.append(face)
            else:
                raise ParseError(f"unsupported record {record!r}", path=path, line=lineno)

    if not vertices or not triangles:
        raise ParseError("OBJ file needs at least one vertex and one face", path=path)
    return TriMesh(PointCloud(np.asarray(vertices)), np.asarray(triangles, dtype=np.int64))


def write_obj(mesh: TriMesh, path: str | Path) -> None:
    """Write ``mesh`` as ASCII OBJ."""
    rows = ["v " + xyz for xyz in _format_xyz(mesh.vertices.points)]
    rows += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles.tolist()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n", encoding="ascii")
