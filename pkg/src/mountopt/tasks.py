"""End-effector trajectories and the six household task families.

Episodes are sampled independently of the robot: each stores a trajectory
*tail* in world coordinates, and the episode runner prepends the robot's own
initial end-effector pose.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from ._geometry import homogeneous, rot_y, rot_z, rotation_log, slerp_matrix
from ._kernels import path_pose
from .exceptions import BadParams, NoPath, UnknownTask, ValidationError
from .world import OccupancyMap, Rect, astar, obb_overlaps_aabb

TASKS = ("RandomGoal", "RandomObstacle", "PickPlace", "Door", "Drawer", "Cabinet")

HEIGHT_BANDS = {
    "RandomGoal": (0.1, 1.7),
    "RandomObstacle": (0.1, 1.7),
    "PickPlace": (0.1, 1.7),
    "Drawer": (0.4, 1.2),
    "Cabinet": (0.4, 1.7),
    "Door": (0.9, 1.1),
}
TOP_GRASP_PITCH = math.pi / 2
BOTTOM_GRASP_PITCH = -math.pi / 2

# progress metres charged per radian of pure reorientation
ROTATION_LENGTH = 0.2


def grasp_rotation(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Tool frame whose z (approach) axis has heading ``yaw`` and is tilted
    down by ``pitch``: 0 is a horizontal approach, +pi/2 points straight down."""
    return rot_z(yaw) @ rot_y(math.pi / 2 + pitch) @ rot_z(roll)


def approach_pitch(R) -> float:
    a = np.asarray(R)[:, 2]
    return float(math.asin(np.clip(-a[2], -1.0, 1.0)))


@dataclass(frozen=True)
class EETrajectory:
    positions: np.ndarray
    rotations: np.ndarray
    speeds: np.ndarray | float = 0.3
    tag: str = "line"

    def __post_init__(self):
        p = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        R = np.ascontiguousarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        if len(p) == 0 or len(p) != len(R):
            raise ValidationError("trajectory needs matching, non-empty positions/rotations")
        if not (np.isfinite(p).all() and np.isfinite(R).all()):
            raise ValidationError("trajectory waypoints must be finite")
        n = max(len(p) - 1, 1)
        if np.ndim(self.speeds) == 0:
            speeds = np.full(n, float(self.speeds))
        else:
            speeds = np.array(self.speeds, dtype=float).reshape(n)
        if (speeds <= 0).any():
            raise ValidationError("nominal speeds must be positive")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "speeds", speeds)

    @classmethod
    def from_poses(cls, poses, speeds=0.3, tag="line") -> "EETrajectory":
        poses = np.asarray(poses, dtype=float).reshape(-1, 4, 4)
        return cls(poses[:, :3, 3], poses[:, :3, :3], speeds, tag)

    def __len__(self):
        return len(self.positions)

    @cached_property
    def _segments(self):
        dp = np.ascontiguousarray(np.diff(self.positions, axis=0))
        w = np.array([rotation_log(a.T @ b) for a, b in zip(self.rotations[:-1],
                                                            self.rotations[1:])],
                     dtype=float).reshape(-1, 3)
        lengths = np.linalg.norm(dp, axis=1) + ROTATION_LENGTH * np.linalg.norm(w, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        return dp, w, lengths, cum

    @property
    def length(self) -> float:
        return float(self._segments[3][-1])

    @property
    def cumulative(self) -> np.ndarray:
        return self._segments[3]

    def _locate(self, s: float):
        _, _, lengths, cum = self._segments
        if len(lengths) == 0:
            return 0, 0.0
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(lengths) - 1)
        t = (s - cum[i]) / lengths[i] if lengths[i] > 0 else 1.0
        return i, min(max(t, 0.0), 1.0)

    def at(self, s: float) -> np.ndarray:
        """Homogeneous pose at progress ``s`` (clamped to the ends)."""
        dp, w, _, cum = self._segments
        return path_pose(self.positions, self.rotations, dp, w, cum, float(s))

    def speed_at(self, s: float) -> float:
        return float(self.speeds[self._locate(s)[0]])

    def end(self) -> np.ndarray:
        return homogeneous(self.rotations[-1], self.positions[-1])

    def prepend(self, pose, speed: float | None = None) -> "EETrajectory":
        pose = np.asarray(pose, dtype=float)
        speeds = np.concatenate([[speed or self.speeds[0]], self.speeds])[: len(self)]
        return EETrajectory(np.vstack([pose[:3, 3], self.positions]),
                            np.concatenate([pose[None, :3, :3], self.rotations]),
                            speeds if len(self) else speed or 0.3, self.tag)

    def then(self, other: "EETrajectory") -> "EETrajectory":
        """Concatenate; ``other`` is joined by a segment from this end to its start."""
        speeds = np.concatenate([self.speeds[: len(self) - 1], [other.speeds[0]],
                                 other.speeds[: len(other) - 1]])
        return EETrajectory(np.vstack([self.positions, other.positions]),
                            np.concatenate([self.rotations, other.rotations]), speeds, self.tag)


def line_trajectory(start, goal, n: int = 2, speed: float = 0.3, tag="line") -> EETrajectory:
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    ts = np.linspace(0.0, 1.0, n)
    pos = [start[:3, 3] + t * (goal[:3, 3] - start[:3, 3]) for t in ts]
    rots = [slerp_matrix(start[:3, :3], goal[:3, :3], t) for t in ts]
    return EETrajectory(np.array(pos), np.array(rots), speed, tag)


# ---------------------------------------------------------------------------
# articulated objects

ARTICULATED_DEFAULTS = {
    "drawer": {"length": 0.3},
    "cabinet": {"radius": 0.5, "angle": math.pi / 2, "hinge": "left", "push": False},
    "door": {"radius": 0.8, "angle": math.pi / 2, "hinge": "left", "push": False},
}


def articulated_trajectory(kind: str, object_pose, params: dict | None = None,
                           speed: float = 0.15, samples: int = 10) -> EETrajectory:
    """Opening motion for a handle at the object-frame origin.

    Object frame: x is the outward normal of the front face, z is up.  The
    gripper approaches along -x.  A drawer is pulled straight out along +x;
    a cabinet or door leaf swings about a vertical hinge ``radius`` to the
    left (+y) or right (-y) of the handle, opening towards +x, or towards -x
    with ``push``.
    """
    if kind not in ARTICULATED_DEFAULTS:
        raise BadParams(f"unknown articulated object {kind!r}")
    p = {**ARTICULATED_DEFAULTS[kind], **(params or {})}
    T_obj = np.asarray(object_pose, dtype=float)
    grasp = grasp_rotation(math.pi, 0.0)
    if kind == "drawer":
        if not p["length"] > 0:
            raise BadParams("drawer pull length must be positive")
        pos = np.array([[0.0, 0.0, 0.0], [p["length"], 0.0, 0.0]])
        rots = np.stack([grasp, grasp])
    else:
        r, ang = p["radius"], p["angle"]
        if not (r > 0 and 0 < ang <= math.pi):
            raise BadParams("arc needs radius > 0 and 0 < angle <= pi")
        if p["hinge"] not in ("left", "right"):
            raise BadParams("hinge must be 'left' or 'right'")
        side = 1.0 if p["hinge"] == "left" else -1.0
        # the sign keeps both hinges opening to the same side of the face
        turn = -side if p["push"] else side
        th = turn * ang * np.linspace(0.0, 1.0, samples + 1)
        c, s = np.cos(th), np.sin(th)
        Rz = np.zeros((len(th), 3, 3))
        Rz[:, 0, 0], Rz[:, 0, 1], Rz[:, 1, 0], Rz[:, 1, 1], Rz[:, 2, 2] = c, -s, s, c, 1.0
        # handle starts at -hinge relative to the hinge axis at (0, side*r)
        pos = np.column_stack([side * r * s, side * r * (1.0 - c), np.zeros_like(th)])
        rots = Rz @ grasp
    R_obj, t_obj = T_obj[:3, :3], T_obj[:3, 3]
    return EETrajectory(pos @ R_obj.T + t_obj, R_obj @ rots, speed, kind)


# ---------------------------------------------------------------------------
# planner paths


def plan_ee_path(occ: OccupancyMap, start, goal, inflate: float = 0.0,
                 speed: float = 0.3) -> EETrajectory:
    """A* over the (inflated) raster from start to goal, xy at cell centres;
    height and orientation interpolated along the path."""
    start, goal = np.asarray(start, float), np.asarray(goal, float)
    free = occ.free_mask(inflate)
    cells, _ = astar(free, occ.cell_of(start[:3, 3]), occ.cell_of(goal[:3, 3]))
    xy = np.array([occ.center_of(i, j) for i, j in cells])
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    frac = np.concatenate([[0.0], np.cumsum(seg)])
    frac = frac / frac[-1] if frac[-1] > 0 else np.zeros_like(frac)
    z = start[2, 3] + frac * (goal[2, 3] - start[2, 3])
    rots = np.array([slerp_matrix(start[:3, :3], goal[:3, :3], f) for f in frac])
    return EETrajectory(np.column_stack([xy, z]), rots, speed, "planner")


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class MapEvent:
    """Remove ``obstacle`` once tail progress reaches ``at`` (m)."""

    at: float
    obstacle: Rect


@dataclass(frozen=True)
class TaskEpisode:
    task: str
    occupancy: OccupancyMap = field(repr=False)
    start: tuple
    trajectory: EETrajectory = field(repr=False)
    thresholds: tuple = (0.1, 0.7854)
    horizon: int = 1000
    seed: int = 0
    events: tuple = ()

    def __post_init__(self):
        if self.task not in TASKS:
            raise UnknownTask(self.task)
        if not (self.thresholds[0] > 0 and self.thresholds[1] > 0):
            raise ValidationError("thresholds must be positive")

    def with_thresholds(self, translation: float, rotation: float) -> "TaskEpisode":
        return replace(self, thresholds=(float(translation), float(rotation)))

    def signature(self) -> tuple:
        """Hashable content summary used for determinism checks."""
        tr = self.trajectory
        return (self.task, self.start, tr.positions.tobytes(), tr.rotations.tobytes(),
                tuple((r.xmin, r.ymin, r.xmax, r.ymax, r.height)
                      for r in self.occupancy.obstacles),
                tuple((e.at, e.obstacle) for e in self.events), self.seed)


@dataclass(frozen=True)
class TaskConfig:
    map_size: float = 8.0
    cell: float = 0.05
    edge_band: float = 0.1
    goal_distance: tuple = (1.0, 3.0)
    object_distance: tuple = (1.5, 2.5)
    obstacle_spacing: float = 1.7
    ee_speed: float = 0.3
    thresholds: tuple = (0.1, 0.7854)
    horizon: int = 1000
    base_half_extents: tuple = (0.48, 0.38)
    path_obstacle: bool = True


def goal_pitch(height: float, band: tuple, rng, edge: float = 0.1) -> float:
    lo, hi = band
    # reaching down to the floor means approaching from above, and vice versa
    if height <= lo + edge:
        return TOP_GRASP_PITCH
    if height >= hi - edge:
        return BOTTOM_GRASP_PITCH
    return float(rng.uniform(-math.pi / 4, math.pi / 4))


def _sample_start(occ: OccupancyMap, cfg: TaskConfig, rng, span=None):
    span = span if span is not None else cfg.map_size / 2 - 1.0
    for _ in range(1000):
        x, y = rng.uniform(-span, span, 2)
        yaw = float(rng.uniform(-math.pi, math.pi))
        pose = (float(x), float(y), yaw)
        if not occ.footprint_collides(pose, cfg.base_half_extents):
            return pose
    raise NoPath("could not place the robot in free space")


def _inside(xy, cfg: TaskConfig, margin=1.0) -> bool:
    return bool(np.all(np.abs(xy) <= cfg.map_size / 2 - margin))


def _random_goal(rng, cfg: TaskConfig, start, band):
    for _ in range(1000):
        d = rng.uniform(*cfg.goal_distance)
        th = rng.uniform(-math.pi, math.pi)
        xy = np.array(start[:2]) + d * np.array([math.cos(th), math.sin(th)])
        if _inside(xy, cfg, 0.5):
            break
    h = float(rng.uniform(*band))
    R = grasp_rotation(float(rng.uniform(-math.pi, math.pi)), goal_pitch(h, band, rng,
                                                                         cfg.edge_band))
    return homogeneous(R, [xy[0], xy[1], h])


class _NoObstacles:
    @staticmethod
    def footprint_collides(pose, half_extents):
        return False


_EMPTY = _NoObstacles()


def _empty_map(cfg: TaskConfig, obstacles=()) -> OccupancyMap:
    return OccupancyMap((cfg.map_size, cfg.map_size), cfg.cell, obstacles=obstacles)


def _sample_random_goal(rng, cfg):
    occ = _empty_map(cfg)
    start = _sample_start(_EMPTY, cfg, rng)
    goal = _random_goal(rng, cfg, start, HEIGHT_BANDS["RandomGoal"])
    return occ, start, EETrajectory.from_poses([goal], cfg.ee_speed, "line"), ()


def _obstacle_field(rng, cfg: TaskConfig) -> list:
    half = cfg.map_size / 2
    rects = []
    for cx in np.arange(-half + cfg.obstacle_spacing / 2, half, cfg.obstacle_spacing):
        for cy in np.arange(-half + cfg.obstacle_spacing / 2, half, cfg.obstacle_spacing):
            if rng.random() < 0.2:
                continue
            jx, jy = rng.uniform(-0.3, 0.3, 2) * cfg.obstacle_spacing
            hx, hy = rng.uniform(0.15, 0.45, 2)
            rects.append(Rect.around(cx + jx, cy + jy, hx, hy, float(rng.uniform(0.3, 1.2))))
    return rects


def _sample_random_obstacle(rng, cfg):
    occ = _empty_map(cfg, _obstacle_field(rng, cfg))
    inflate = float(np.hypot(*cfg.base_half_extents)) * 0.5
    free = occ.free_mask(inflate)
    for _ in range(200):
        start = _sample_start(occ, cfg, rng)
        goal = _random_goal(rng, cfg, start, HEIGHT_BANDS["RandomObstacle"])
        if not free[occ.cell_of(start[:2])] or not free[occ.cell_of(goal[:2, 3])]:
            continue
        if occ.sphere_collides(goal[:3, 3], 0.1):
            continue
        try:
            start_pose = homogeneous(goal[:3, :3], [start[0], start[1], goal[2, 3]])
            path = plan_ee_path(occ, start_pose, goal, inflate, cfg.ee_speed)
        except NoPath:
            continue
        # first cell is under the robot; the runner supplies the actual EE start
        tail = EETrajectory(path.positions[1:], path.rotations[1:], cfg.ee_speed, "planner") \
            if len(path) > 1 else EETrajectory.from_poses([goal], cfg.ee_speed, "planner")
        return occ, start, tail, ()
    raise NoPath("could not sample a solvable obstacle episode")


def _facing_object(rng, cfg, start, dist_range, depth):
    """Axis-aligned object whose front face (normal n) looks towards the start."""
    limit = cfg.map_size / 2 - 0.8
    for _ in range(1000):
        d = rng.uniform(*dist_range)
        th = rng.uniform(-math.pi, math.pi)
        cx, cy = start[0] + d * math.cos(th), start[1] + d * math.sin(th)
        if abs(cx) > limit or abs(cy) > limit:
            continue
        tx, ty = start[0] - cx, start[1] - cy
        normals = [n for n in (0.0, math.pi / 2, math.pi, -math.pi / 2)
                   if math.cos(n) * tx + math.sin(n) * ty > 0.3 * d]
        if normals:
            yaw = float(normals[rng.integers(len(normals))])
            return np.array([cx, cy]), yaw
    raise NoPath("could not place the task object")


def _body_rect(center, yaw, half_width, depth, height) -> Rect:
    # body extends behind the front face (face at center)
    nx, ny = math.cos(yaw), math.sin(yaw)
    cx, cy = center[0], center[1]
    xs = (cx - depth * nx - half_width * -ny, cx - depth * nx + half_width * -ny,
          cx - half_width * -ny, cx + half_width * -ny)
    ys = (cy - depth * ny - half_width * nx, cy - depth * ny + half_width * nx,
          cy - half_width * nx, cy + half_width * nx)
    return Rect(min(xs), min(ys), max(xs), max(ys), height)


def _path_obstacle(rng, cfg, start, target_xy, avoid) -> list:
    if not cfg.path_obstacle:
        return []
    a, b = np.array(start[:2]), np.asarray(target_xy)
    u = (b - a) / max(np.linalg.norm(b - a), 1e-9)
    px, py = -u[1], u[0]
    for _ in range(100):
        f = rng.uniform(0.35, 0.6)
        # integers(0, 2) draws exactly what choice() of two items would
        off = rng.uniform(0.5, 0.9) * (-1.0, 1.0)[int(rng.integers(0, 2))]
        cx = a[0] + f * (b[0] - a[0]) + off * px
        cy = a[1] + f * (b[1] - a[1]) + off * py
        rect = Rect.around(cx, cy, 0.2, 0.2, 0.3)
        if not obb_overlaps_aabb(start, cfg.base_half_extents, (rect.xmin, rect.ymin),
                                 (rect.xmax, rect.ymax)):
            return [rect]
    return []


HANDLE_OFFSET = 0.06


def _sample_articulated(kind, rng, cfg):
    band = HEIGHT_BANDS["Drawer" if kind == "drawer" else "Cabinet"]
    start = _sample_start(_EMPTY, cfg, rng)
    c, yaw = _facing_object(rng, cfg, start, cfg.object_distance, 0.5)
    h = float(rng.uniform(*band))
    n = np.array([math.cos(yaw), math.sin(yaw)])
    body_half = 0.3 if kind == "drawer" else 0.3
    params = {}
    handle_xy = c + HANDLE_OFFSET * n
    if kind == "cabinet":
        hinge = "left" if rng.random() < 0.5 else "right"
        params = {"hinge": hinge}
        # handle near the free edge of a 0.5 m leaf spanning the face
        side = 1.0 if hinge == "left" else -1.0
        t = np.array([-n[1], n[0]])
        handle_xy = c - side * 0.25 * t + HANDLE_OFFSET * n
        body_half = 0.3
    body = _body_rect(c, yaw, body_half, 0.5, min(h + 0.15, 2.0))
    obj_pose = homogeneous(rot_z(yaw), [handle_xy[0], handle_xy[1], h])
    motion = articulated_trajectory(kind, obj_pose, params)
    pre = motion.positions[0] + (0.25 * n[0], 0.25 * n[1], 0.0)
    tail = EETrajectory(np.vstack([pre, motion.positions]),
                        np.concatenate([motion.rotations[:1], motion.rotations]),
                        np.concatenate([[cfg.ee_speed], motion.speeds]), kind)
    avoid = [body]
    extra = _path_obstacle(rng, cfg, start, c + 0.9 * n, avoid)
    occ = _empty_map(cfg, avoid + extra)
    return occ, start, tail, ()


def _sample_drawer(rng, cfg):
    return _sample_articulated("drawer", rng, cfg)


def _sample_cabinet(rng, cfg):
    return _sample_articulated("cabinet", rng, cfg)


DOOR_GAP = 0.9


def _sample_door(rng, cfg):
    # wall along y at x = wall_x; the robot starts on the -x side
    wall_x = float(rng.uniform(-0.5, 0.5))
    gap_c = float(rng.uniform(-1.0, 1.0))
    half = cfg.map_size / 2
    walls = [Rect(wall_x - 0.05, -half, wall_x + 0.05, gap_c - DOOR_GAP / 2, 2.0),
             Rect(wall_x - 0.05, gap_c + DOOR_GAP / 2, wall_x + 0.05, half, 2.0)]
    leaf = Rect(wall_x - 0.02, gap_c - DOOR_GAP / 2, wall_x + 0.02, gap_c + DOOR_GAP / 2, 2.0)
    occ = _empty_map(cfg, walls + [leaf])
    for _ in range(1000):
        # close enough that approach, swing and pass-through fit the horizon
        x = float(rng.uniform(wall_x - 2.2, wall_x - 1.3))
        y = float(gap_c + rng.uniform(-1.0, 1.0))
        yaw = float(rng.uniform(-math.pi / 2, math.pi / 2))
        if not occ.footprint_collides((x, y, yaw), cfg.base_half_extents):
            break
    start = (x, y, yaw)
    hinge = "left" if rng.random() < 0.5 else "right"
    side = 1.0 if hinge == "left" else -1.0
    radius = 0.8
    h = float(rng.uniform(*HEIGHT_BANDS["Door"]))
    # handle on the robot side of the leaf, radius away from the hinge edge
    hinge_y = gap_c + side * DOOR_GAP / 2
    handle = np.array([wall_x - 0.02 - HANDLE_OFFSET, hinge_y - side * radius, h])
    obj = homogeneous(rot_z(math.pi), handle)
    # object +x points back at the robot; pushing swings the leaf away, through the frame
    motion = articulated_trajectory("door", obj, {"radius": radius, "push": True,
                                                  "hinge": "right" if hinge == "left" else "left"},
                                    speed=cfg.ee_speed)
    pre = homogeneous(motion.rotations[0], handle + np.array([-0.25, 0.0, 0.0]))
    through = homogeneous(grasp_rotation(0.0, 0.0), [wall_x + 0.6, gap_c, h])
    tail = EETrajectory.from_poses([pre], cfg.ee_speed).then(motion).then(
        EETrajectory.from_poses([through], cfg.ee_speed))
    tail = EETrajectory(tail.positions, tail.rotations, tail.speeds, "door")
    # once the handle is held the leaf moves with the gripper, not as an obstacle
    return occ, start, tail, (MapEvent(float(tail.cumulative[1]), leaf),)


def _sample_pick_place(rng, cfg):
    band = HEIGHT_BANDS["PickPlace"]
    start = _sample_start(_EMPTY, cfg, rng)
    pick = _random_goal(rng, cfg, start, band)
    place = _random_goal(rng, cfg, start, band)
    tables = []
    for g in (pick, place):
        top = g[2, 3] - 0.08
        if top > 0.05:
            tables.append(Rect.around(g[0, 3], g[1, 3], 0.25, 0.25, top))
    # clear the table by 0.1 m without leaving the height band
    lift = pick.copy()
    lift[2, 3] = min(lift[2, 3] + 0.1, band[1])
    above = place.copy()
    above[2, 3] = min(above[2, 3] + 0.1, band[1])
    tail = EETrajectory.from_poses([pick, lift, above, place], cfg.ee_speed, "line")
    occ = _empty_map(cfg, tables)
    if occ.footprint_collides(start, cfg.base_half_extents):
        occ = _empty_map(cfg, [])
    return occ, start, tail, ()


_SAMPLERS = {
    "RandomGoal": _sample_random_goal,
    "RandomObstacle": _sample_random_obstacle,
    "PickPlace": _sample_pick_place,
    "Door": _sample_door,
    "Drawer": _sample_drawer,
    "Cabinet": _sample_cabinet,
}


def sample_episode(task: str, config: TaskConfig | None = None, seed: int = 0) -> TaskEpisode:
    """Deterministic episode for (task, config, seed)."""
    if task not in _SAMPLERS:
        raise UnknownTask(f"unknown task {task!r}; expected one of {TASKS}")
    cfg = config or TaskConfig()
    rng = np.random.default_rng([seed, TASKS.index(task)])
    occ, start, tail, events = _SAMPLERS[task](rng, cfg)
    return TaskEpisode(task, occ, start, tail, tuple(cfg.thresholds), cfg.horizon, seed, events)
