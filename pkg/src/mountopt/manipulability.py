"""Yoshikawa manipulability and its workspace-grid average."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._geometry import approach_rotation, matrix_to_quat, quat_to_matrix
from .kinematics import IKSettings, KinematicChain, select_columns, BASE_JOINTS
from .robot import RobotDescription

SINGULAR_EPS = 1e-12

# base-frame approach directions of the six sampled tool orientations
APPROACH_AXES = np.array([
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
])


def manipulability_measure(J) -> float:
    """sqrt(det(J J^T)) via singular values; exactly 0 for (near-)singular J."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    rows, cols = J.shape
    if cols < 1:
        raise ValueError("Jacobian needs at least one column")
    if rows > cols:
        # J J^T has rank <= cols < rows
        return 0.0
    sigma = np.linalg.svd(J, compute_uv=False)
    if sigma.min() < SINGULAR_EPS:
        return 0.0
    return float(np.prod(sigma))


def _axis_points(lo: float, hi: float, spacing: float) -> np.ndarray:
    n = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
    pts = lo + spacing * np.arange(n)
    if abs(pts[-1] - hi) < 1e-9:
        pts[-1] = hi
    return pts


def default_orientations() -> np.ndarray:
    return np.array([matrix_to_quat(approach_rotation(a)) for a in APPROACH_AXES])


@dataclass(frozen=True)
class WorkspaceGrid:
    corner_min: tuple = (-0.2, -0.8, 0.1)
    corner_max: tuple = (0.2, 0.8, 1.7)
    spacing: float = 0.1
    orientations: np.ndarray = field(default_factory=default_orientations)

    def __post_init__(self):
        lo, hi = np.asarray(self.corner_min, float), np.asarray(self.corner_max, float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo <= hi):
            raise ValueError("corner_min must not exceed corner_max")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        quats = np.asarray(self.orientations, dtype=float)
        if quats.shape != (6, 4):
            raise ValueError("exactly six orientations are required")
        if not np.allclose(np.linalg.norm(quats, axis=1), 1.0, atol=1e-9):
            raise ValueError("orientations must be unit quaternions")

    def axes(self) -> list:
        return [_axis_points(self.corner_min[i], self.corner_max[i], self.spacing)
                for i in range(3)]

    def points(self) -> np.ndarray:
        xs, ys, zs = self.axes()
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def targets(self) -> np.ndarray:
        """(points * 6, 4, 4) homogeneous targets, orientation index fastest."""
        pts = self.points()
        rots = np.array([quat_to_matrix(q) for q in self.orientations])
        T = np.zeros((len(pts), len(rots), 4, 4))
        T[:, :, :3, :3] = rots[None]
        T[:, :, :3, 3] = pts[:, None, :]
        T[:, :, 3, 3] = 1.0
        return T.reshape(-1, 4, 4)


@dataclass(frozen=True)
class ManipField:
    points: np.ndarray
    orientations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values = values.reshape(len(self.points), len(self.orientations))
        if values.size and (not np.all(np.isfinite(values)) or values.min() < 0):
            raise ValueError("manipulability values must be finite and >= 0")
        object.__setattr__(self, "values", values)

    @property
    def mu(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0

    @property
    def reachable(self) -> int:
        return int(np.count_nonzero(self.values))


def seed_configs(robot: RobotDescription, rng_seed: int, count: int) -> np.ndarray:
    """One uniform joint seed per pose index, each from its own RNG stream."""
    lo, hi = robot.lower_limits, robot.upper_limits
    seeds = np.empty((count, robot.dof))
    for i in range(count):
        seeds[i] = np.random.default_rng([rng_seed, i]).uniform(lo, hi)
    return seeds


def global_manipulability(robot: RobotDescription, grid: WorkspaceGrid | None = None,
                          rng_seed: int = 0, settings: IKSettings | None = None) -> ManipField:
    """Mean whole-body manipulability over the grid; unreachable poses count as 0.

    IK moves arm and torso with the base fixed (the grid is base-relative);
    the measure itself includes the planar base columns.
    """
    grid = grid or WorkspaceGrid()
    pts = grid.points()
    targets = grid.targets()
    if len(targets) == 0:
        return ManipField(pts, grid.orientations, np.zeros((0, 6)))
    chain = KinematicChain(robot)
    seeds = seed_configs(robot, rng_seed, len(targets))
    Q, ok, _ = chain.ik_batch(targets, seeds, settings)
    names = list(BASE_JOINTS) + list(robot.dof_names)
    values = np.zeros(len(targets))
    for i in np.flatnonzero(ok):
        T, J = chain.fk_jacobian(Q[i])
        values[i] = manipulability_measure(select_columns(robot, J, T[:3, 3], names))
    return ManipField(pts, grid.orientations, values.reshape(len(pts), -1))


CSV_COLUMNS = ("x", "y", "z", "orientation_index", "m")


def export_heatmap(field: ManipField, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for p, row in zip(field.points, field.values):
            for k, m in enumerate(row):
                writer.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), k,
                                 repr(float(m))])
        writer.writerow(["mu", "", "", "", repr(field.mu)])
    return path


def read_heatmap(path) -> tuple:
    """Returns (ManipField rebuilt from the rows, mu stated in the summary row)."""
    points, values, stated = [], [], None
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected heatmap header {header}")
        for row in reader:
            if row[0] == "mu":
                stated = float(row[4])
                continue
            p = (float(row[0]), float(row[1]), float(row[2]))
            if int(row[3]) == 0:
                points.append(p)
                values.append([])
            values[-1].append(float(row[4]))
    pts = np.array(points).reshape(-1, 3)
    vals = np.array(values).reshape(len(pts), -1) if values else np.zeros((0, 6))
    return ManipField(pts, default_orientations(), vals), stated
