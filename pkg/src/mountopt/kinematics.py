"""Forward kinematics, geometric Jacobians and damped-least-squares IK.

The per-joint loops are compiled with numba; :class:`KinematicChain` caches
the packed arrays for one (robot, frame) pair so the simulator can call
them every control tick.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from ._geometry import frozen, matrix_to_quat, quat_to_matrix, rotation_log
from .exceptions import DimensionMismatch, UnknownFrame
from .robot import RobotDescription

BASE_JOINTS = ("base_x", "base_y", "base_yaw")

_FIXED, _REVOLUTE, _PRISMATIC = 0, 1, 2
_KIND = {"fixed": _FIXED, "revolute": _REVOLUTE, "prismatic": _PRISMATIC}


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    quaternion: np.ndarray = field(default_factory=lambda: frozen([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        object.__setattr__(self, "position", frozen(self.position))
        object.__setattr__(self, "quaternion", frozen(q / norm))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3].copy(), matrix_to_quat(T[:3, :3]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


@dataclass(frozen=True)
class Twist:
    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        lin, ang = frozen(self.linear), frozen(self.angular)
        if lin.shape != (3,) or ang.shape != (3,):
            raise ValueError("twist components must be 3-vectors")
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)


@dataclass(frozen=True)
class IKSettings:
    damping: float = 0.01
    step_clamp: float = 0.2
    max_iterations: int = 200
    position_tolerance: float = 1e-4
    orientation_tolerance: float = 1e-3
    clamp_limits: bool = True


@dataclass(frozen=True)
class IKResult:
    q: np.ndarray
    success: bool
    iterations: int
    position_error: float
    orientation_error: float

    def __bool__(self):
        return self.success


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _matmul4(A, B):
    C = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            C[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j] + A[i, 3] * B[3, j]
    return C


@njit(cache=True)
def _joint_motion(kind, axis, value):
    M = np.eye(4)
    if kind == 1:
        c = math.cos(value)
        s = math.sin(value)
        v = 1.0 - c
        x, y, z = axis[0], axis[1], axis[2]
        M[0, 0] = c + x * x * v
        M[0, 1] = x * y * v - z * s
        M[0, 2] = x * z * v + y * s
        M[1, 0] = y * x * v + z * s
        M[1, 1] = c + y * y * v
        M[1, 2] = y * z * v - x * s
        M[2, 0] = z * x * v - y * s
        M[2, 1] = z * y * v + x * s
        M[2, 2] = c + z * z * v
    elif kind == 2:
        M[0, 3] = axis[0] * value
        M[1, 3] = axis[1] * value
        M[2, 3] = axis[2] * value
    return M


@njit(cache=True)
def _fk_kernel(origins, kinds, axes, qidx, q):
    T = np.eye(4)
    for k in range(origins.shape[0]):
        T = _matmul4(T, origins[k])
        if kinds[k] != 0:
            T = _matmul4(T, _joint_motion(kinds[k], axes[k], q[qidx[k]]))
    return T


@njit(cache=True)
def _fk_jac_kernel(origins, kinds, axes, qidx, q, ndof):
    T = np.eye(4)
    m = origins.shape[0]
    zs = np.zeros((m, 3))
    ps = np.zeros((m, 3))
    for k in range(m):
        T = _matmul4(T, origins[k])
        if kinds[k] != 0:
            for r in range(3):
                zs[k, r] = T[r, 0] * axes[k, 0] + T[r, 1] * axes[k, 1] + T[r, 2] * axes[k, 2]
                ps[k, r] = T[r, 3]
            T = _matmul4(T, _joint_motion(kinds[k], axes[k], q[qidx[k]]))
    J = np.zeros((6, ndof))
    pe = T[:3, 3]
    for k in range(m):
        col = qidx[k]
        if kinds[k] == 1:
            dx = pe[0] - ps[k, 0]
            dy = pe[1] - ps[k, 1]
            dz = pe[2] - ps[k, 2]
            J[0, col] += zs[k, 1] * dz - zs[k, 2] * dy
            J[1, col] += zs[k, 2] * dx - zs[k, 0] * dz
            J[2, col] += zs[k, 0] * dy - zs[k, 1] * dx
            J[3, col] += zs[k, 0]
            J[4, col] += zs[k, 1]
            J[5, col] += zs[k, 2]
        elif kinds[k] == 2:
            J[0, col] += zs[k, 0]
            J[1, col] += zs[k, 1]
            J[2, col] += zs[k, 2]
    return T, J


@njit(cache=True)
def _rot_log(R):
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = (tr - 1.0) / 2.0
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    theta = math.acos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if theta < 1e-9:
        return 0.5 * w
    if math.pi - theta < 1e-6:
        axis = np.empty(3)
        for i in range(3):
            axis[i] = math.sqrt(max(0.5 * (R[i, i] + 1.0), 0.0))
        k = 0
        for i in range(3):
            if axis[i] > axis[k]:
                k = i
        for j in range(3):
            if j != k:
                axis[j] = 0.5 * (R[k, j] + R[j, k]) / (2.0 * axis[k])
        n = math.sqrt(axis[0] ** 2 + axis[1] ** 2 + axis[2] ** 2)
        return axis * (theta / n)
    return w * (theta / (2.0 * math.sin(theta)))


@njit(cache=True)
def _pose_error(T, target):
    e = np.empty(6)
    for r in range(3):
        e[r] = target[r, 3] - T[r, 3]
    # rotation taking the current frame onto the target, in base coordinates
    D = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            D[i, j] = (target[i, 0] * T[j, 0] + target[i, 1] * T[j, 1]
                       + target[i, 2] * T[j, 2])
    w = _rot_log(D)
    e[3] = w[0]
    e[4] = w[1]
    e[5] = w[2]
    return e


@njit(cache=True)
def _dls_delta(J, e, active, lam):
    n_act = 0
    for i in range(active.shape[0]):
        if active[i]:
            n_act += 1
    Ja = np.empty((6, n_act))
    c = 0
    for i in range(active.shape[0]):
        if active[i]:
            Ja[:, c] = J[:, i]
            c += 1
    A = Ja @ Ja.T
    for i in range(6):
        A[i, i] += lam * lam
    y = np.linalg.solve(A, e)
    dqa = Ja.T @ y
    dq = np.zeros(active.shape[0])
    c = 0
    for i in range(active.shape[0]):
        if active[i]:
            dq[i] = dqa[c]
            c += 1
    return dq


@njit(cache=True)
def _ik_kernel(origins, kinds, axes, qidx, q0, target, lower, upper, active,
               lam, step_clamp, max_iter, tol_p, tol_r, clamp):
    q = q0.copy()
    ndof = q.shape[0]
    ep = 0.0
    er = 0.0
    for it in range(max_iter + 1):
        T, J = _fk_jac_kernel(origins, kinds, axes, qidx, q, ndof)
        e = _pose_error(T, target)
        ep = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
        er = math.sqrt(e[3] ** 2 + e[4] ** 2 + e[5] ** 2)
        if ep < tol_p and er < tol_r:
            return q, it, True, ep, er
        if it == max_iter:
            break
        dq = _dls_delta(J, e, active, lam)
        biggest = 0.0
        for i in range(ndof):
            if abs(dq[i]) > biggest:
                biggest = abs(dq[i])
        if biggest > step_clamp:
            dq *= step_clamp / biggest
        for i in range(ndof):
            q[i] += dq[i]
            if clamp:
                if q[i] < lower[i]:
                    q[i] = lower[i]
                elif q[i] > upper[i]:
                    q[i] = upper[i]
    return q, max_iter, False, ep, er


@njit(cache=True)
def _ik_batch_kernel(origins, kinds, axes, qidx, seeds, targets, lower, upper, active,
                     lam, step_clamp, max_iter, tol_p, tol_r, clamp):
    n = seeds.shape[0]
    Q = np.empty_like(seeds)
    ok = np.zeros(n, dtype=np.bool_)
    iters = np.zeros(n, dtype=np.int64)
    for b in range(n):
        q, it, success, ep, er = _ik_kernel(origins, kinds, axes, qidx, seeds[b], targets[b],
                                            lower, upper, active, lam, step_clamp, max_iter,
                                            tol_p, tol_r, clamp)
        Q[b] = q
        ok[b] = success
        iters[b] = it
    return Q, ok, iters


@njit(cache=True)
def _dls_step_kernel(origins, kinds, axes, qidx, q, target, active, lam, max_delta):
    """One DLS update with per-joint displacement bounds (uniform rescale)."""
    T, J = _fk_jac_kernel(origins, kinds, axes, qidx, q, q.shape[0])
    e = _pose_error(T, target)
    dq = _dls_delta(J, e, active, lam)
    ratio = 0.0
    for i in range(q.shape[0]):
        if max_delta[i] > 0.0:
            r = abs(dq[i]) / max_delta[i]
            if r > ratio:
                ratio = r
    if ratio > 1.0:
        dq /= ratio
    return q + dq, T, e


# ---------------------------------------------------------------------------
# chains


class KinematicChain:
    """Packed joint path from ``base_frame`` (default: root) to ``frame``.

    Joint vectors always use the robot's full movable-joint ordering; joints
    that are not on the path get zero Jacobian columns.
    """

    def __init__(self, robot: RobotDescription, frame: str | None = None,
                 base_frame: str | None = None):
        frame = frame or robot.tool_frame
        path = robot.path_to(frame)
        if base_frame is not None and base_frame != robot.root:
            prefix = robot.path_to(base_frame)
            names = [j.name for j in path]
            if names[: len(prefix)] != [j.name for j in prefix]:
                raise UnknownFrame(f"{base_frame!r} is not an ancestor of {frame!r}")
            path = path[len(prefix):]
        self.robot = robot
        self.frame = frame
        self.ndof = robot.dof
        index = {name: i for i, name in enumerate(robot.dof_names)}
        m = len(path)
        self._origins = np.ascontiguousarray(
            np.array([j.origin for j in path]).reshape(m, 4, 4), dtype=float)
        self._kinds = np.array([_KIND[j.type] for j in path], dtype=np.int64)
        self._axes = np.ascontiguousarray(np.array([j.axis for j in path]).reshape(m, 3),
                                          dtype=float)
        self._qidx = np.array([index.get(j.name, 0) for j in path], dtype=np.int64)
        self.lower = np.ascontiguousarray(robot.lower_limits, dtype=float)
        self.upper = np.ascontiguousarray(robot.upper_limits, dtype=float)

    def _q(self, q) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=float)
        if q.shape != (self.ndof,):
            raise DimensionMismatch(f"expected {self.ndof} joint values, got shape {q.shape}")
        return q

    def fk(self, q) -> np.ndarray:
        return _fk_kernel(self._origins, self._kinds, self._axes, self._qidx, self._q(q))

    def fk_jacobian(self, q):
        return _fk_jac_kernel(self._origins, self._kinds, self._axes, self._qidx,
                              self._q(q), self.ndof)

    def jacobian(self, q) -> np.ndarray:
        return self.fk_jacobian(q)[1]

    def _active(self, active):
        if active is None:
            return np.ones(self.ndof, dtype=np.bool_)
        return np.ascontiguousarray(active, dtype=np.bool_)

    def ik(self, target, seed, settings: IKSettings | None = None, active=None) -> IKResult:
        settings = settings or IKSettings()
        target = np.ascontiguousarray(_as_matrix(target), dtype=float)
        if not np.all(np.isfinite(target)):
            raise ValueError("IK target must be finite")
        q, it, ok, ep, er = _ik_kernel(
            self._origins, self._kinds, self._axes, self._qidx, self._q(seed).copy(), target,
            self.lower, self.upper, self._active(active), settings.damping,
            settings.step_clamp, settings.max_iterations, settings.position_tolerance,
            settings.orientation_tolerance, settings.clamp_limits)
        return IKResult(frozen(q), bool(ok), int(it), float(ep), float(er))

    def ik_batch(self, targets, seeds, settings: IKSettings | None = None, active=None):
        """Solve many targets; returns (Q, success mask, iteration counts)."""
        settings = settings or IKSettings()
        targets = np.ascontiguousarray(targets, dtype=float)
        seeds = np.ascontiguousarray(seeds, dtype=float)
        if seeds.ndim != 2 or seeds.shape[1] != self.ndof or len(seeds) != len(targets):
            raise DimensionMismatch("seeds must be (n, dof) and match the target count")
        return _ik_batch_kernel(
            self._origins, self._kinds, self._axes, self._qidx, seeds, targets,
            self.lower, self.upper, self._active(active), settings.damping,
            settings.step_clamp, settings.max_iterations, settings.position_tolerance,
            settings.orientation_tolerance, settings.clamp_limits)

    def dls_step(self, q, target, max_delta, active=None, damping: float = 0.01):
        """Single bounded DLS update; returns (q_new, current pose, 6-vector error)."""
        return _dls_step_kernel(self._origins, self._kinds, self._axes, self._qidx,
                                self._q(q), np.ascontiguousarray(target, dtype=float),
                                self._active(active), damping,
                                np.ascontiguousarray(max_delta, dtype=float))


def _as_matrix(target) -> np.ndarray:
    if isinstance(target, Pose):
        return target.matrix
    return np.asarray(target, dtype=float)


_CHAINS: dict = {}


def chain_for(robot: RobotDescription, frame: str | None = None) -> KinematicChain:
    key = (id(robot), frame)
    cached = _CHAINS.get(key)
    if cached is None or cached.robot is not robot:
        if len(_CHAINS) > 256:
            _CHAINS.clear()
        cached = _CHAINS[key] = KinematicChain(robot, frame)
    return cached


def forward_kinematics(robot: RobotDescription, q, frame: str | None = None,
                       base_frame: str | None = None) -> Pose:
    """Pose of ``frame`` in ``base_frame`` (default: the root/base link)."""
    if base_frame is None:
        return Pose.from_matrix(chain_for(robot, frame).fk(q))
    return Pose.from_matrix(KinematicChain(robot, frame, base_frame).fk(q))


def forward_kinematics_matrix(robot: RobotDescription, q, frame: str | None = None,
                              base_frame: str | None = None) -> np.ndarray:
    if base_frame is None:
        return chain_for(robot, frame).fk(q)
    return KinematicChain(robot, frame, base_frame).fk(q)


def link_transforms(robot: RobotDescription, q) -> dict:
    """Base-frame transform of every link at configuration ``q``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (robot.dof,):
        raise DimensionMismatch(f"expected {robot.dof} joint values, got {q.shape}")
    index = {name: i for i, name in enumerate(robot.dof_names)}
    out = {robot.root: np.eye(4)}
    pending = list(robot.joints)
    while pending:
        rest = []
        for j in pending:
            if j.parent not in out:
                rest.append(j)
                continue
            T = out[j.parent] @ j.origin
            if j.movable:
                T = T @ _joint_motion(_KIND[j.type], np.asarray(j.axis, float), q[index[j.name]])
            out[j.child] = T
        pending = rest
    return out


def _resolve_selector(robot: RobotDescription, joints) -> list:
    if joints is None:
        return list(robot.dof_names)
    if isinstance(joints, str):
        groups = {
            "all": list(robot.dof_names),
            "whole_body": list(BASE_JOINTS) + list(robot.dof_names),
            "arm": list(robot.arm_joints),
            "torso": list(robot.torso_joints),
            "base": list(BASE_JOINTS),
        }
        if joints not in groups:
            raise KeyError(f"unknown joint group {joints!r}")
        return groups[joints]
    return list(joints)


def jacobian(robot: RobotDescription, q, frame: str | None = None,
             joints: Sequence[str] | str | None = None) -> np.ndarray:
    """Geometric 6xn Jacobian (linear rows first) in the base frame.

    ``joints`` selects columns: movable joint names, the virtual planar base
    joints ``base_x``/``base_y``/``base_yaw``, or a group name
    (``all``, ``whole_body``, ``arm``, ``torso``, ``base``).
    """
    T, J = chain_for(robot, frame).fk_jacobian(q)
    return select_columns(robot, J, T[:3, 3], _resolve_selector(robot, joints))


def select_columns(robot: RobotDescription, J: np.ndarray, ee_position, names) -> np.ndarray:
    index = {name: i for i, name in enumerate(robot.dof_names)}
    out = np.zeros((6, len(names)))
    for c, name in enumerate(names):
        if name == "base_x":
            out[0, c] = 1.0
        elif name == "base_y":
            out[1, c] = 1.0
        elif name == "base_yaw":
            out[0, c] = -ee_position[1]
            out[1, c] = ee_position[0]
            out[5, c] = 1.0
        elif name in index:
            out[:, c] = J[:, index[name]]
        else:
            raise KeyError(f"unknown joint {name!r}")
    return out


def ik_dls(robot: RobotDescription, target, seed, params: IKSettings | None = None,
           frame: str | None = None, joints: Sequence[str] | None = None) -> IKResult:
    """Damped-least-squares IK from ``seed``; the base stays fixed.

    A failed solve is reported through ``IKResult.success`` rather than raised.
    """
    chain = chain_for(robot, frame)
    active = None
    if joints is not None:
        names = set(_resolve_selector(robot, joints))
        active = np.array([n in names for n in robot.dof_names])
    return chain.ik(target, seed, params, active)


def pose_error(current: Pose, target: Pose) -> tuple:
    """(translational error m, rotational error rad) between two poses."""
    dp = float(np.linalg.norm(target.position - current.position))
    dr = float(np.linalg.norm(rotation_log(target.rotation @ current.rotation.T)))
    return dp, dr
