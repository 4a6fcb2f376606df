"""Connected blobs of lit pixels and their bounding boxes.

Labeling is two-pass union-find over the sparse list of lit pixels: pixels
are visited in raster order and merged with their already-visited
neighbours (W, N for 4-connectivity; W, NW, N, NE for 8), then component
extents are gathered in a second pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .frames import BinaryFrame


class BoundingBox(NamedTuple):
    """Inclusive pixel rectangle."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def box_center_y(box: BoundingBox) -> float:
    """Row midpoint; half-integers are exact in binary floating point."""
    return (box.y_min + box.y_max) / 2


@dataclass(frozen=True)
class DetectionParams:
    connectivity: int = 8
    min_area: int = 4

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")


@numba.njit(cache=True, nogil=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True, nogil=True)
def _label_sparse(coords, width, connectivity):
    """Component stats for sorted unique linear pixel indices.

    Returns (x_min, y_min, x_max, y_max, count) arrays, one entry per
    component, in order of each component's first pixel in raster order.
    """
    n = coords.shape[0]
    parent = np.arange(n)
    for i in range(n):
        c = coords[i]
        x = c % width
        # neighbours already visited in raster order
        for k in range(4):
            if k == 0:
                if x == 0:
                    continue
                q = c - 1
            elif k == 1:
                q = c - width
            elif k == 2:
                if connectivity == 4 or x == 0:
                    continue
                q = c - width - 1
            else:
                if connectivity == 4 or x == width - 1:
                    continue
                q = c - width + 1
            if q < 0:
                continue
            j = np.searchsorted(coords[:i], q)
            if j < i and coords[j] == q:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj

    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for i in range(n):
        r = _find(parent, i)
        if comp[r] < 0:
            comp[r] = n_comp
            n_comp += 1
    x_min = np.full(n_comp, width, dtype=np.int64)
    y_min = np.full(n_comp, np.iinfo(np.int64).max, dtype=np.int64)
    x_max = np.full(n_comp, -1, dtype=np.int64)
    y_max = np.full(n_comp, -1, dtype=np.int64)
    count = np.zeros(n_comp, dtype=np.int64)
    for i in range(n):
        k = comp[_find(parent, i)]
        y = coords[i] // width
        x = coords[i] - y * width
        x_min[k] = min(x_min[k], x)
        x_max[k] = max(x_max[k], x)
        y_min[k] = min(y_min[k], y)
        y_max[k] = max(y_max[k], y)
        count[k] += 1
    return x_min, y_min, x_max, y_max, count


def detect_coords(coords: np.ndarray, width: int, params: DetectionParams | None = None) -> list[BoundingBox]:
    params = params or DetectionParams()
    if len(coords) == 0:
        return []
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    if len(coords) > 1 and not (np.diff(coords) > 0).all():
        coords = np.unique(coords)
    x0, y0, x1, y1, count = _label_sparse(coords, width, params.connectivity)
    keep = count >= params.min_area
    boxes = [BoundingBox(*b) for b in zip(x0[keep].tolist(), y0[keep].tolist(), x1[keep].tolist(), y1[keep].tolist())]
    boxes.sort(key=lambda b: (b.y_min, b.x_min, b.y_max, b.x_max))
    return boxes


def detect(frame: BinaryFrame | np.ndarray, params: DetectionParams | None = None) -> list[BoundingBox]:
    """Boxes of components with at least ``min_area`` pixels, sorted by (y_min, x_min).

    Accepts a :class:`BinaryFrame` or a dense 2-D array (nonzero = lit).
    """
    if isinstance(frame, BinaryFrame):
        return detect_coords(frame.coords, frame.geometry.width, params)
    pixels = np.asarray(frame)
    return detect_coords(np.flatnonzero(pixels.ravel()), pixels.shape[1], params)
