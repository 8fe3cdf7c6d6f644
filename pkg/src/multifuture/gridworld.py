"""Grid geometry: quantization, cell centers, offset targets, the
8-connected scene graph, and cross-scale cell correspondence.

Cells are half-open rectangles [low, high) along each axis, so a point on
an interior boundary belongs to the cell on the positive side. Cell index
i in [0, rows*cols) maps to (r, c) in row-major order; x runs along
columns, y along rows.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GridRangeError

Point2 = Tuple[float, float]
CellIndex = int


@dataclass(frozen=True)
class GridSpec:
    """Discretization of a planar scene into rows x cols cells."""

    rows: int
    cols: int
    origin: Point2 = (0.0, 0.0)
    cell_w: float = 1.0
    cell_h: float = 1.0
    scale_id: int = 0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if not (self.cell_w > 0 and self.cell_h > 0):
            raise ConfigError("cell extents must be positive")
        if not all(math.isfinite(v) for v in (*self.origin, self.cell_w, self.cell_h)):
            raise ConfigError("grid origin and cell extents must be finite")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def width(self) -> float:
        return self.cols * self.cell_w

    @property
    def height(self) -> float:
        return self.rows * self.cell_h

    def bbox(self) -> Tuple[float, float, float, float]:
        """(x_lo, y_lo, x_hi, y_hi) of the covered region."""
        ox, oy = self.origin
        return (ox, oy, ox + self.width, oy + self.height)

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "origin": [self.origin[0], self.origin[1]],
            "cell": [self.cell_w, self.cell_h],
            "scale_id": self.scale_id,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GridSpec":
        return cls(
            rows=int(obj["rows"]),
            cols=int(obj["cols"]),
            origin=(float(obj["origin"][0]), float(obj["origin"][1])),
            cell_w=float(obj["cell"][0]),
            cell_h=float(obj["cell"][1]),
            scale_id=int(obj.get("scale_id", 0)),
        )


class ClampCounter:
    """Thread-safe tally of out-of-bounds points clamped to border cells."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self):
        with self._lock:
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


#: Global advisory counter; purely diagnostic, never read by the numerics.
clamp_events = ClampCounter()


def check_cell(g: GridSpec, i: CellIndex) -> None:
    if not (0 <= i < g.n_cells):
        raise GridRangeError(f"cell index {i} outside [0, {g.n_cells})")


def cell_rc(g: GridSpec, i: CellIndex) -> Tuple[int, int]:
    check_cell(g, i)
    return divmod(i, g.cols)


def cell_index(g: GridSpec, r: int, c: int) -> CellIndex:
    if not (0 <= r < g.rows and 0 <= c < g.cols):
        raise GridRangeError(f"cell ({r}, {c}) outside {g.rows}x{g.cols} grid")
    return r * g.cols + c


def quantize_point(g: GridSpec, p: Point2, clamp: bool = True) -> CellIndex:
    """Cell whose half-open rectangle contains p.

    Out-of-bounds points are clamped to the nearest border cell (counted in
    ``clamp_events``) unless ``clamp`` is False, in which case a
    GridRangeError names the offending coordinate.
    """
    x, y = p
    if not (math.isfinite(x) and math.isfinite(y)):
        raise GridRangeError(f"non-finite point ({x}, {y})")
    x_lo, y_lo, x_hi, y_hi = g.bbox()
    if not (x_lo <= x < x_hi and y_lo <= y < y_hi):
        if not clamp:
            if not (x_lo <= x < x_hi):
                raise GridRangeError(f"x={x} outside [{x_lo}, {x_hi})")
            raise GridRangeError(f"y={y} outside [{y_lo}, {y_hi})")
        clamp_events.increment()
    c = int(math.floor((x - x_lo) / g.cell_w))
    r = int(math.floor((y - y_lo) / g.cell_h))
    c = min(max(c, 0), g.cols - 1)
    r = min(max(r, 0), g.rows - 1)
    return r * g.cols + c


def cell_center(g: GridSpec, i: CellIndex) -> Point2:
    r, c = cell_rc(g, i)
    ox, oy = g.origin
    return (ox + (c + 0.5) * g.cell_w, oy + (r + 0.5) * g.cell_h)


def cell_centers(g: GridSpec) -> np.ndarray:
    """(rows, cols, 2) array of every cell center, x before y."""
    ox, oy = g.origin
    xs = ox + (np.arange(g.cols) + 0.5) * g.cell_w
    ys = oy + (np.arange(g.rows) + 0.5) * g.cell_h
    out = np.empty((g.rows, g.cols, 2), dtype=np.float64)
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


def offset_targets(g: GridSpec, p: Point2) -> np.ndarray:
    """(rows, cols, 2) array of p minus each cell center."""
    x, y = p
    if not (math.isfinite(x) and math.isfinite(y)):
        raise GridRangeError(f"non-finite point ({x}, {y})")
    return np.asarray([x, y], dtype=np.float64) - cell_centers(g)


def moore_neighbors(rows: int, cols: int, r: int, c: int) -> List[Tuple[int, int]]:
    """8-neighborhood of (r, c) clipped at the borders, (r, c) excluded."""
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols:
                out.append((rr, cc))
    return out


def neighbor_list(g: GridSpec, i: CellIndex) -> List[CellIndex]:
    """Sorted 8-connected neighbors of cell i (3 at corners, 5 on edges)."""
    r, c = cell_rc(g, i)
    return sorted(rr * g.cols + cc for rr, cc in moore_neighbors(g.rows, g.cols, r, c))


def rescale_cell(src: GridSpec, dst: GridSpec, i: CellIndex) -> CellIndex:
    """Cell of ``dst`` containing the center of cell i of ``src``.

    Both grids must cover the same bounding box.
    """
    if not all(
        math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)
        for a, b in zip(src.bbox(), dst.bbox())
    ):
        raise ConfigError(f"grid bounding boxes differ: {src.bbox()} vs {dst.bbox()}")
    return quantize_point(dst, cell_center(src, i))


def quantize_trajectory(
    g: GridSpec, points: Iterable[Point2], clamp: bool = True
) -> List[CellIndex]:
    return [quantize_point(g, p, clamp=clamp) for p in points]


def pool_factor(fine: GridSpec, coarse: GridSpec) -> Tuple[int, int]:
    """Integer (row, col) downsampling factor between two aligned grids."""
    if fine.rows % coarse.rows or fine.cols % coarse.cols:
        raise ConfigError(
            f"fine grid {fine.rows}x{fine.cols} is not an integer multiple of "
            f"coarse grid {coarse.rows}x{coarse.cols}"
        )
    return fine.rows // coarse.rows, fine.cols // coarse.cols
