"""Kinematic episode simulation.

Velocities are integrated analytically; the only geometry checked is the
base footprint against the map, and the end-effector sphere against the
obstacles, the floor and the robot's own fixed bodies.  There is no
dynamics, no contact, and no reward: the MDP reward and discount that a
learned policy would need are deliberately not implemented here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from ._geometry import homogeneous, rot_z
from ._kernels import local_box_hits, sphere_hits
from .exceptions import DimensionMismatch, ValidationError
from .kinematics import KinematicChain, _fk_jac_kernel, _fk_kernel, _pose_error
from .robot import RobotDescription
from .tasks import ROTATION_LENGTH, TaskEpisode
from .world import OccupancyMap

DT = 0.02
EE_RADIUS = 0.05
IK_DAMPING = 0.01
FAILURE_KINDS = ("Collision", "JointLimit", "TrackingExceeded", "Horizon")


@dataclass(frozen=True)
class SimState:
    base: tuple
    q: np.ndarray
    time: float = 0.0
    progress: float = 0.0
    steps: int = 0
    max_translation_error: float = 0.0
    max_rotation_error: float = 0.0
    sum_translation_error: float = 0.0
    translation_error: float = 0.0
    rotation_error: float = 0.0


@dataclass(frozen=True)
class Failure:
    kind: str
    step: int
    detail: str = ""

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ValidationError(f"unknown failure kind {self.kind!r}")


@dataclass(frozen=True)
class Command:
    """Body-frame base twist (vx, vy, wz), torso velocity and EE path speed."""

    base: tuple = (0.0, 0.0, 0.0)
    torso: float = 0.0
    ee_speed: float = 0.0


def integrate_base(pose, twist, dt: float, drive: str = "omni") -> tuple:
    """Exact pose after holding a body-frame twist for ``dt``.

    Differential drive ignores the lateral component (unicycle).
    """
    x, y, yaw = pose
    vx, vy, wz = twist
    if drive == "diff":
        vy = 0.0
    th = wz * dt
    if abs(th) < 1e-12:
        dx, dy = vx * dt, vy * dt
    else:
        # 2 sin^2(th/2) is 1 - cos(th) without the cancellation at small th
        s, v = math.sin(th), 2.0 * math.sin(0.5 * th) ** 2
        dx = (vx * s - vy * v) / wz
        dy = (vx * v + vy * s) / wz
    cy, sy = math.cos(yaw), math.sin(yaw)
    return (x + cy * dx - sy * dy, y + sy * dx + cy * dy, yaw + th)


def closed_form_base(pose, twist, t: float, drive: str = "omni") -> tuple:
    """Pose at time ``t`` under a constant body twist (one exponential)."""
    return integrate_base(pose, twist, t, drive)


def base_matrix(pose) -> np.ndarray:
    x, y, yaw = pose
    return homogeneous(rot_z(yaw), [x, y, 0.0])


def _inverse(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    return homogeneous(R.T, -R.T @ T[:3, 3])


@njit(cache=True)
def _to_base(pose, T):
    """World pose ``T`` expressed in the frame of base pose (x, y, yaw)."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    out = np.empty((4, 4))
    for j in range(4):
        a, b = T[0, j], T[1, j]
        if j == 3:
            a, b = a - x, b - y
        out[0, j] = c * a + s * b
        out[1, j] = -s * a + c * b
        out[2, j] = T[2, j]
        out[3, j] = T[3, j]
    return out


@njit(cache=True)
def _arm_tick(origins, kinds, axes, qidx, q, target, active, lam, max_delta, lower, upper):
    """One damped least-squares step on the active joints, rescaled to the
    per-joint bounds and clipped to the limits."""
    n = q.shape[0]
    T0, J = _fk_jac_kernel(origins, kinds, axes, qidx, q, n)
    e = _pose_error(T0, target)
    idx = np.nonzero(active)[0]
    Ja = np.empty((6, idx.shape[0]))
    for c in range(idx.shape[0]):
        Ja[:, c] = J[:, idx[c]]
    A = Ja @ Ja.T
    for i in range(6):
        A[i, i] += lam * lam
    dqa = Ja.T @ np.linalg.solve(A, e)
    ratio = 1.0
    for c in range(idx.shape[0]):
        i = idx[c]
        if max_delta[i] > 0.0:
            ratio = max(ratio, abs(dqa[c]) / max_delta[i])
    q1 = q.copy()
    at_limit = False
    for c in range(idx.shape[0]):
        i = idx[c]
        v = q[i] + dqa[c] / ratio
        if v < lower[i]:
            v = lower[i]
            at_limit = True
        elif v > upper[i]:
            v = upper[i]
            at_limit = True
        q1[i] = v
    T = _fk_kernel(origins, kinds, axes, qidx, q1)
    return q1, T, _pose_error(T, target), at_limit


def _self_boxes(robot: RobotDescription) -> tuple:
    """Base-frame boxes for links whose pose does not depend on any joint.

    A ``box: [sx, sy, sz]`` geometry is centred in x/y on its link frame and
    rises from the frame origin by sz.
    """
    inverses, lows, highs = [], [], []
    for link in robot.links:
        geo = link.geometry or {}
        if "box" not in geo:
            continue
        path = robot.path_to(link.name)
        if any(j.movable for j in path):
            continue
        T = np.eye(4)
        for j in path:
            T = T @ j.origin
        sx, sy, sz = (float(v) for v in geo["box"])
        inverses.append(_inverse(T))
        lows.append((-sx / 2, -sy / 2, 0.0))
        highs.append((sx / 2, sy / 2, sz))
    return (np.array(inverses, dtype=float).reshape(-1, 4, 4),
            np.array(lows, dtype=float).reshape(-1, 3), np.array(highs, dtype=float).reshape(-1, 3))


class Simulator:
    """Per-episode simulator for one (designed) robot."""

    def __init__(self, robot: RobotDescription, occupancy: OccupancyMap,
                 thresholds=(0.1, 0.7854), ee_radius: float = EE_RADIUS):
        self.robot = robot
        self.occupancy = occupancy
        self.thresholds = (float(thresholds[0]), float(thresholds[1]))
        self.ee_radius = float(ee_radius)
        self.chain = KinematicChain(robot)
        names = robot.dof_names
        self.torso_index = [names.index(n) for n in robot.torso_joints]
        self.active = np.array([n in robot.arm_joints for n in names], dtype=np.bool_)
        self.lower = np.ascontiguousarray(robot.lower_limits)
        self.upper = np.ascontiguousarray(robot.upper_limits)
        self.velocity = np.where(np.isfinite(robot.velocity_limits), robot.velocity_limits, 2.0)
        self.half_extents = tuple(float(v) for v in robot.base_footprint.half_extents)
        self.boxes = _self_boxes(robot)

    def ee_in_base(self, q) -> np.ndarray:
        return self.chain.fk(q)

    def ee_world(self, state: SimState) -> np.ndarray:
        return base_matrix(state.base) @ self.chain.fk(state.q)

    def base_collides(self, pose) -> bool:
        return self.occupancy.footprint_collides(pose, self.half_extents)

    def ee_collides(self, ee_base: np.ndarray, base_pose) -> str:
        """Name of what the EE sphere hits ('' if nothing)."""
        p = ee_base[:3, 3]
        if p[2] < self.ee_radius:
            return "floor"
        if local_box_hits(p, self.ee_radius, *self.boxes):
            return "self"
        if self.occupancy.obstacles:
            x, y, yaw = base_pose
            c, s = math.cos(yaw), math.sin(yaw)
            world = np.array([x + c * p[0] - s * p[1], y + s * p[0] + c * p[1], p[2]])
            if sphere_hits(world, self.ee_radius, self.occupancy.rect_array):
                return "obstacle"
        return ""

    def initial_failure(self, state: SimState):
        if self.base_collides(state.base):
            return Failure("Collision", 0, "base at start")
        hit = self.ee_collides(self.ee_in_base(state.q), state.base)
        if hit:
            return Failure("Collision", 0, f"end-effector at start ({hit})")
        return None

    def step(self, state: SimState, base_cmd, torso_vel: float, ee_target,
             dt: float = DT):
        """Advance one tick; returns the new SimState or a terminal Failure."""
        if not dt > 0:
            raise ValidationError("dt must be positive")
        base = integrate_base(state.base, base_cmd, dt, self.robot.drive)
        q = np.array(state.q, dtype=float)
        if q.shape != (self.robot.dof,):
            raise DimensionMismatch("joint vector does not match the robot")
        for i in self.torso_index:
            q[i] = min(max(q[i] + torso_vel * dt, self.lower[i]), self.upper[i])
        target = _to_base(base, np.asarray(ee_target, dtype=float))
        c = self.chain
        q, T, e, at_limit = _arm_tick(c._origins, c._kinds, c._axes, c._qidx, q,
                                      np.ascontiguousarray(target), self.active, IK_DAMPING,
                                      self.velocity * dt, self.lower, self.upper)
        step = state.steps + 1
        if self.base_collides(base):
            return Failure("Collision", step, "base")
        hit = self.ee_collides(T, base)
        if hit:
            return Failure("Collision", step, f"end-effector ({hit})")
        ep = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
        er = math.sqrt(e[3] ** 2 + e[4] ** 2 + e[5] ** 2)
        if ep > self.thresholds[0] or er > self.thresholds[1]:
            kind = "JointLimit" if at_limit else "TrackingExceeded"
            return Failure(kind, step, f"error {ep:.3f} m / {er:.3f} rad")
        return replace(state, base=base, q=q, time=state.time + dt, steps=step,
                       max_translation_error=max(state.max_translation_error, ep),
                       max_rotation_error=max(state.max_rotation_error, er),
                       sum_translation_error=state.sum_translation_error + ep,
                       translation_error=ep, rotation_error=er)


@dataclass(frozen=True)
class StepContext:
    """What a controller may look at besides the state."""

    trajectory: object
    occupancy: OccupancyMap
    obstacle_points: np.ndarray = field(repr=False)
    residual: float = 0.0
    robot: object = field(default=None, repr=False)


@dataclass(frozen=True)
class EpisodeResult:
    task: str
    seed: int
    success: bool
    failure: str | None
    steps: int
    mean_translation_error: float
    max_translation_error: float
    max_rotation_error: float
    thresholds: tuple
    progress: float = 0.0
    length: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _result(episode, state, success, failure, traj) -> EpisodeResult:
    steps = failure.step if failure else state.steps
    mean = state.sum_translation_error / state.steps if state.steps else 0.0
    return EpisodeResult(episode.task, episode.seed, success, failure.kind if failure else None,
                         steps, mean, state.max_translation_error, state.max_rotation_error,
                         tuple(episode.thresholds), state.progress, traj.length)


def run_episode(robot: RobotDescription, episode: TaskEpisode, controller,
                dt: float = DT, q0=None, compiled: bool = True) -> EpisodeResult:
    """Roll out ``controller`` (an object with ``command(state, ctx)``) on one episode.

    A bound policy that offers ``rollout(sim, episode, state, trajectory, dt)``
    runs the whole loop itself unless ``compiled`` is false.
    """
    sim = Simulator(robot, episode.occupancy, episode.thresholds)
    bind = getattr(controller, "bind", None)
    policy = bind(robot) if bind is not None else controller
    if q0 is None:
        # a policy may bring its own starting posture
        q0 = getattr(policy, "start_config", None)
    state = SimState(base=tuple(float(v) for v in episode.start),
                     q=np.array(robot.home_config() if q0 is None else q0, dtype=float))
    traj = episode.trajectory.prepend(sim.ee_world(state))
    failure = sim.initial_failure(state)
    if failure:
        return _result(episode, state, False, failure, traj)
    rollout = getattr(policy, "rollout", None) if compiled else None
    if rollout is not None:
        return rollout(sim, episode, state, traj, dt)
    offset = float(traj.cumulative[1]) if len(traj) > 1 else 0.0
    events = sorted(episode.events, key=lambda ev: ev.at)
    occupancy = episode.occupancy
    points = occupancy.occupied_centers()
    length = traj.length
    s = 0.0
    residual = 0.0
    for _ in range(episode.horizon):
        while events and s >= offset + events[0].at:
            occupancy = occupancy.without(events.pop(0).obstacle)
            sim.occupancy = occupancy
            points = occupancy.occupied_centers()
        ctx = StepContext(traj, occupancy, points, residual, robot)
        cmd = policy.command(state, ctx)
        s_next = min(length, s + max(cmd.ee_speed, 0.0) * dt)
        out = sim.step(state, cmd.base, cmd.torso, traj.at(s_next), dt)
        if isinstance(out, Failure):
            return _result(episode, replace(state, progress=s), False, out, traj)
        state = replace(out, progress=s_next)
        s = s_next
        residual = out.translation_error + ROTATION_LENGTH * out.rotation_error
        if s >= length:
            return _result(episode, state, True, None, traj)
    return _result(episode, state, False, Failure("Horizon", state.steps), traj)
