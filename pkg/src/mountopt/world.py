"""2-D occupancy maps, collision checks and grid A*."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.ndimage import distance_transform_edt

from ._kernels import footprint_hits, sphere_hits
from .exceptions import NoPath, ValidationError

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned obstacle footprint with a height (m)."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height: float = 1.0

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax and self.height > 0):
            raise ValidationError(f"degenerate obstacle {self}")

    @classmethod
    def around(cls, cx, cy, half_x, half_y, height=1.0) -> "Rect":
        return cls(cx - half_x, cy - half_y, cx + half_x, cy + half_y, height)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2])

    @property
    def half(self) -> np.ndarray:
        return np.array([(self.xmax - self.xmin) / 2, (self.ymax - self.ymin) / 2])


def footprint_corners(pose, half_extents) -> np.ndarray:
    x, y, yaw = pose
    hx, hy = half_extents
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[hx, hy], [hx, -hy], [-hx, -hy], [-hx, hy]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def obb_overlaps_aabb(pose, half_extents, lo, hi) -> bool:
    """Separating-axis test: oriented footprint vs the box [lo, hi] (touching = no overlap)."""
    x, y, yaw = pose
    cs, sn = math.cos(yaw), math.sin(yaw)
    c, s = abs(cs), abs(sn)
    hx, hy = half_extents
    rx, ry = (hi[0] - lo[0]) / 2, (hi[1] - lo[1]) / 2
    dx, dy = x - (lo[0] + hi[0]) / 2, y - (lo[1] + hi[1]) / 2
    # world axes, then footprint axes
    if abs(dx) >= rx + hx * c + hy * s or abs(dy) >= ry + hx * s + hy * c:
        return False
    if abs(dx * cs + dy * sn) >= hx + rx * c + ry * s:
        return False
    return abs(dy * cs - dx * sn) < hy + rx * s + ry * c


def point_box_distance(p, lo, hi) -> float:
    q = np.clip(p, lo, hi)
    return float(np.linalg.norm(np.asarray(p) - q))


class OccupancyMap:
    """Rectangle obstacles plus their raster.

    A cell is occupied when its square shares positive area with any
    obstacle, so the raster over-approximates the rectangles.  Everything
    outside ``bounds`` counts as occupied.
    """

    def __init__(self, size=(8.0, 8.0), cell: float = 0.05, origin=None, obstacles=()):
        if not cell > 0:
            raise ValidationError("cell size must be positive")
        size = np.asarray(size, dtype=float)
        self.cell = float(cell)
        self.shape = tuple(int(round(v / cell)) for v in size)
        self.origin = np.asarray(origin if origin is not None else -size / 2, dtype=float)
        self.size = np.array(self.shape) * self.cell
        self.obstacles = tuple(obstacles)

    @cached_property
    def rect_array(self) -> np.ndarray:
        """Obstacles as rows (xmin, ymin, xmax, ymax, height)."""
        return np.array([(r.xmin, r.ymin, r.xmax, r.ymax, r.height) for r in self.obstacles],
                        dtype=float).reshape(-1, 5)

    @cached_property
    def grid(self) -> np.ndarray:
        grid = np.zeros(self.shape, dtype=bool)
        for rect in self.obstacles:
            self._stamp(grid, rect)
        return grid

    def _index_range(self, lo, hi, axis):
        a = (lo - self.origin[axis]) / self.cell
        b = (hi - self.origin[axis]) / self.cell
        i0 = max(int(math.floor(a + 1e-9)), 0)
        i1 = min(int(math.ceil(b - 1e-9)), self.shape[axis])
        return i0, i1

    def _stamp(self, grid, rect: Rect):
        i0, i1 = self._index_range(rect.xmin, rect.xmax, 0)
        j0, j1 = self._index_range(rect.ymin, rect.ymax, 1)
        if i0 < i1 and j0 < j1:
            grid[i0:i1, j0:j1] = True

    def with_obstacles(self, extra) -> "OccupancyMap":
        return OccupancyMap(self.size, self.cell, self.origin, self.obstacles + tuple(extra))

    def without(self, rect: Rect) -> "OccupancyMap":
        return OccupancyMap(self.size, self.cell, self.origin,
                            tuple(r for r in self.obstacles if r is not rect))

    @cached_property
    def bounds(self) -> tuple:
        return self.origin, self.origin + self.size

    def cell_of(self, xy) -> tuple:
        ij = np.floor((np.asarray(xy, dtype=float)[:2] - self.origin) / self.cell).astype(int)
        return int(ij[0]), int(ij[1])

    def center_of(self, i, j) -> np.ndarray:
        return self.origin + (np.array([i, j]) + 0.5) * self.cell

    def in_map(self, i, j) -> bool:
        return 0 <= i < self.shape[0] and 0 <= j < self.shape[1]

    def _outside(self, corners) -> bool:
        lo, hi = self.bounds
        return bool(np.any(corners < lo) or np.any(corners > hi))

    def footprint_collides(self, pose, half_extents) -> bool:
        """Exact check against the rectangle list and the map boundary."""
        lo, hi = self.bounds
        return footprint_hits(float(pose[0]), float(pose[1]), float(pose[2]),
                              float(half_extents[0]), float(half_extents[1]),
                              self.rect_array, lo, hi)

    def footprint_collides_raster(self, pose, half_extents) -> bool:
        """Same check against occupied cells instead of rectangles."""
        corners = footprint_corners(pose, half_extents)
        if self._outside(corners):
            return True
        i0, j0 = self.cell_of(corners.min(axis=0))
        i1, j1 = self.cell_of(corners.max(axis=0))
        i0, j0 = max(i0, 0), max(j0, 0)
        i1, j1 = min(i1, self.shape[0] - 1), min(j1, self.shape[1] - 1)
        for i, j in np.argwhere(self.grid[i0:i1 + 1, j0:j1 + 1]):
            lo = self.origin + np.array([i + i0, j + j0]) * self.cell
            if obb_overlaps_aabb(pose, half_extents, lo, lo + self.cell):
                return True
        return False

    def sphere_collides(self, point, radius: float) -> bool:
        """End-effector sphere vs obstacle boxes (floor at z = 0 to ``height``)."""
        return sphere_hits(np.asarray(point, dtype=float), float(radius), self.rect_array)

    def occupied_centers(self) -> np.ndarray:
        return self.origin + (np.argwhere(self.grid) + 0.5) * self.cell

    def free_mask(self, inflate: float = 0.0) -> np.ndarray:
        """Cells whose centers are farther than ``inflate`` from any occupied cell or the edge."""
        if inflate <= 0:
            return ~self.grid
        padded = np.pad(self.grid, 1, constant_values=True)
        dist = distance_transform_edt(~padded)[1:-1, 1:-1] * self.cell
        # cell centre to occupied-cell edge is (dist - cell/2)
        return dist - 0.5 * self.cell > inflate


NEIGHBORS = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2))


def astar(free: np.ndarray, start: tuple, goal: tuple) -> tuple:
    """8-connected A* on a boolean grid; diagonals may not cut occupied corners.

    Returns (cells, cost).  Ties on f are broken by smaller h, then by cell
    index, so the result is deterministic.
    """
    nx, ny = free.shape
    for cell in (start, goal):
        if not (0 <= cell[0] < nx and 0 <= cell[1] < ny and free[cell]):
            raise NoPath(f"cell {cell} is not free")

    def h(c):
        return math.hypot(c[0] - goal[0], c[1] - goal[1])

    g = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), h(start), start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1], g[cur]
        closed.add(cur)
        ci, cj = cur
        for di, dj, w in NEIGHBORS:
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < nx and 0 <= nj < ny) or not free[ni, nj]:
                continue
            if di and dj and not (free[ci + di, cj] and free[ci, cj + dj]):
                continue
            cand = g[cur] + w
            nb = (ni, nj)
            if cand < g.get(nb, math.inf) - 1e-12:
                g[nb] = cand
                parent[nb] = cur
                hn = h(nb)
                heapq.heappush(heap, (cand + hn, hn, nb))
    raise NoPath(f"no path from {start} to {goal}")
