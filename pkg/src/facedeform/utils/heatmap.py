"""Deviation colour map and heatmap preview rendering."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike
from PIL import Image, ImageDraw, ImageFont

if TYPE_CHECKING:
    from ..components.geometry import TriMesh

# Colour stops (deviation mm, RGB); linear between stops, clamped outside
COLOR_STOPS: tuple[tuple[float, tuple[int, int, int]], ...] = (
    (-4.0, (0, 0, 255)),
    (-2.0, (0, 128, 255)),
    (0.0, (0, 255, 0)),
    (2.0, (255, 128, 0)),
    (4.0, (255, 0, 0)),
)
DEVIATION_LIMIT = 4.0


def deviation_colors(deviations: ArrayLike) -> np.ndarray:
    """Map signed deviations (mm) to uint8 RGB rows.

    Values are clamped to +/-4 mm, interpolated linearly between the colour stops
    and rounded to the nearest integer.
    """
    values = np.clip(np.asarray(deviations, dtype=np.float64), -DEVIATION_LIMIT, DEVIATION_LIMIT)
    xs = np.array([stop for stop, _ in COLOR_STOPS])
    rgb = np.array([color for _, color in COLOR_STOPS], dtype=np.float64)
    channels = [np.interp(values, xs, rgb[:, c]) for c in range(3)]
    return np.rint(np.stack(channels, axis=-1)).astype(np.uint8)


def render_heatmap_png(
    mesh: TriMesh,
    deviations: ArrayLike,
    path: str | Path,
    *,
    size: int = 512,
    legend_width: int = 64,
) -> Path:
    """Draw a frontal orthographic view of ``mesh`` coloured by deviation.

    The view looks along -y (anterior faces +y); x runs right and z up. Triangles
    are painted back to front. A vertical -4..+4 mm legend is drawn on the right.

    Args:
        mesh: Mesh to draw
        deviations: Signed deviation per vertex (mm)
        path: Output PNG path
        size: Height of the image and width of the mesh viewport in pixels
        legend_width: Width of the legend strip in pixels

    Returns:
        The written path
    """
    path = Path(path)
    colors = deviation_colors(deviations).astype(np.float64)
    verts = mesh.vertices.points

    img = Image.new("RGB", (size + legend_width, size), color=(40, 40, 50))
    draw = ImageDraw.Draw(img)

    # Fit the x/z extent into the viewport with a small margin
    lo = verts[:, [0, 2]].min(axis=0)
    hi = verts[:, [0, 2]].max(axis=0)
    scale = (size - 20) / max(float(np.max(hi - lo)), 1e-9)
    px = 10 + (verts[:, 0] - lo[0]) * scale
    pz = size - 10 - (verts[:, 2] - lo[1]) * scale

    depth = verts[mesh.triangles, 1].mean(axis=1)
    for t in np.argsort(depth, kind="stable"):
        tri = mesh.triangles[t]
        fill = tuple(int(round(c)) for c in colors[tri].mean(axis=0))
        draw.polygon([(px[i], pz[i]) for i in tri], fill=fill)

    # Legend: gradient strip from +4 (top) to -4 (bottom)
    x0 = size + 12
    x1 = size + legend_width // 2
    top, bottom = 20, size - 20
    ramp = np.linspace(DEVIATION_LIMIT, -DEVIATION_LIMIT, bottom - top)
    for row, color in enumerate(deviation_colors(ramp)):
        draw.rectangle([x0, top + row, x1, top + row + 1], fill=tuple(int(c) for c in color))

    font = ImageFont.load_default()
    ticks = ((DEVIATION_LIMIT, top), (0.0, (top + bottom) // 2), (-DEVIATION_LIMIT, bottom))
    for value, y in ticks:
        draw.text((x1 + 2, y - 6), f"{value:+.0f}", fill=(255, 255, 255), font=font)

    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path
