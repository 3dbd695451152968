"""Static and dynamic tipover checks for a mounted design.

The dynamic check compares the braking and gravitational torques of the
arm (plus payload) with the restoring torque of the base about the front
wheel axis.  Lever arms are measured horizontally from a reference x
(by default the x of the whole-system COM) with heights taken from the
ground, following the published worst-case analysis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .exceptions import EmptyLayout, ValidationError
from .kinematics import link_transforms
from .robot import DesignParams, RobotDescription, apply_design

GRAVITY = 9.81
# 1.1 m/s full speed braked to rest in 0.5 s
BRAKING_DECEL = 1.1 / 0.5
ARM_TORQUE_LIMIT = 30.0
KINDS = ("base", "structure", "arm", "payload")


@dataclass(frozen=True)
class Component:
    name: str
    mass: float
    com: np.ndarray
    kind: str = "arm"

    def __post_init__(self):
        com = np.asarray(self.com, dtype=float)
        if com.shape != (3,) or not np.all(np.isfinite(com)):
            raise ValidationError(f"component {self.name!r}: COM must be a finite 3-vector")
        if not (self.mass > 0 and math.isfinite(self.mass)):
            raise ValidationError(f"component {self.name!r}: mass must be positive")
        if self.kind not in KINDS:
            raise ValidationError(f"component {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "com", com)


@dataclass(frozen=True)
class MassLayout:
    components: tuple
    wheels: np.ndarray
    g: float = GRAVITY
    decel: float = BRAKING_DECEL
    max_payload: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        wheels = np.asarray(self.wheels, dtype=float)
        if wheels.ndim != 2 or wheels.shape[1] != 2 or len(wheels) < 3:
            raise ValidationError("at least 3 planar wheel contacts are required")
        if self.decel < 0:
            raise ValidationError("braking deceleration must be >= 0")
        object.__setattr__(self, "wheels", wheels)

    def of_kind(self, *kinds) -> list:
        return [c for c in self.components if c.kind in kinds]

    @property
    def base_mass(self) -> float:
        return float(sum(c.mass for c in self.of_kind("base")))

    def scaled(self, factor: float, kinds=("arm", "payload")) -> "MassLayout":
        comps = [Component(c.name, c.mass * factor, c.com, c.kind) if c.kind in kinds else c
                 for c in self.components]
        return MassLayout(comps, self.wheels, self.g, self.decel, self.max_payload)


@dataclass(frozen=True)
class FeasibilityReport:
    com: np.ndarray
    static_margin: float
    statically_stable: bool
    pivot_x: float
    reference_x: float
    tau_critical: float
    tau_acc: float
    tau_grav: float
    tau_external: float = 0.0
    config: np.ndarray | None = field(default=None, repr=False)

    @property
    def com_xy(self) -> np.ndarray:
        return self.com[:2]

    @property
    def tau_max(self) -> float:
        return self.tau_acc + self.tau_grav + self.tau_external

    @property
    def margin(self) -> float:
        return self.tau_critical - self.tau_max

    @property
    def dynamically_stable(self) -> bool:
        return self.tau_max < self.tau_critical

    @property
    def feasible(self) -> bool:
        return self.statically_stable and self.dynamically_stable

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "config"}
        out["com"] = [float(v) for v in self.com]
        out.update(margin=self.margin, dynamically_stable=self.dynamically_stable,
                   feasible=self.feasible)
        return out


def center_of_mass(layout: MassLayout) -> np.ndarray:
    if not layout.components:
        raise EmptyLayout("mass layout has no components")
    masses = np.array([c.mass for c in layout.components])
    coms = np.array([c.com for c in layout.components])
    return masses @ coms / masses.sum()


def _support_polygon(wheels: np.ndarray) -> np.ndarray:
    hull = ConvexHull(wheels)
    return wheels[hull.vertices]  # counter-clockwise in 2-D


def _segment_distance(p, a, b) -> float:
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def support_margin(point, wheels) -> float:
    """Signed distance from ``point`` to the wheel polygon boundary (+ inside)."""
    p = np.asarray(point, dtype=float)[:2]
    poly = _support_polygon(np.asarray(wheels, dtype=float))
    edges = list(zip(poly, np.roll(poly, -1, axis=0)))
    # 2-D cross product; >= 0 for every CCW edge means inside or on the boundary
    inside = all((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0
                 for a, b in edges)
    dist = min(_segment_distance(p, a, b) for a, b in edges)
    return dist if inside else -dist


def static_stability(layout: MassLayout) -> tuple:
    """(stable, margin); a COM on the boundary is not stable."""
    margin = support_margin(center_of_mass(layout)[:2], layout.wheels)
    return margin > 0.0, margin


def dynamic_stability(layout: MassLayout, pivot_x: float | None = None,
                      reference_x: float | None = None,
                      external_torque: float = 0.0) -> FeasibilityReport:
    """Braking tipover check about the front axle at ``pivot_x``.

    ``reference_x`` is the horizontal origin of every lever arm; None uses
    the x of the whole-system COM.  ``external_torque`` is added to the
    tipping side (pass ARM_TORQUE_LIMIT for a pulling arm).
    """
    com = center_of_mass(layout)
    wheels_x = layout.wheels[:, 0]
    if pivot_x is None:
        pivot_x = float(wheels_x.max())
    if not wheels_x.min() <= pivot_x <= wheels_x.max():
        raise ValidationError(f"pivot_x {pivot_x} lies outside the wheel footprint")
    ref = float(com[0]) if reference_x is None else float(reference_x)

    tau_critical = layout.base_mass * layout.g * (pivot_x - ref)
    tau_acc = tau_grav = 0.0
    for c in layout.of_kind("arm", "payload"):
        dx, z = c.com[0] - ref, c.com[2]
        r = math.hypot(dx, z)
        # alpha measured from the vertical, so sin(alpha) = dx / r = cos(beta)
        sin_alpha = dx / r if r > 0 else 0.0
        tau_grav += c.mass * layout.g * r * sin_alpha
        tau_acc += c.mass * layout.decel * z * sin_alpha

    stable, margin = static_stability(layout)
    return FeasibilityReport(com=com, static_margin=margin, statically_stable=stable,
                             pivot_x=float(pivot_x), reference_x=ref,
                             tau_critical=float(tau_critical), tau_acc=float(tau_acc),
                             tau_grav=float(tau_grav), tau_external=float(external_torque))


# published worst-case component table for the Franka FMM, in metres
_FMM_TABLE = (
    ("link0", 2.40, (0.430, 0.330, 0.907), "arm"),
    ("link1", 2.79, (0.489, 0.389, 0.907), "arm"),
    ("link2", 2.54, (0.681, 0.581, 0.879), "arm"),
    ("link3", 2.25, (0.821, 0.721, 0.907), "arm"),
    ("link4", 2.20, (0.837, 0.737, 0.884), "arm"),
    ("link5", 2.29, (1.005, 0.965, 0.880), "arm"),
    ("link6", 1.35, (1.105, 1.005, 0.880), "arm"),
    ("link7", 0.36, (1.113, 1.013, 0.959), "arm"),
    ("end_effector", 0.71, (1.260, 1.160, 0.928), "arm"),
    ("payload", 3.00, (1.260, 1.160, 0.928), "payload"),
    ("tower", 22.50, (0.300, 0.200, 0.280), "structure"),
    ("base", 135.00, (0.0, 0.0, 0.140), "base"),
)
FMM_WHEELS = ((0.319, 0.276), (0.319, -0.276), (-0.319, -0.276), (-0.319, 0.276))
# lever reference quoted alongside that table; not reproducible from its COM
FMM_QUOTED_REFERENCE_X = 0.144


def fmm_worst_case_layout() -> MassLayout:
    comps = [Component(n, m, np.array(p), k) for n, m, p, k in _FMM_TABLE]
    return MassLayout(comps, np.array(FMM_WHEELS), max_payload=3.0)


# ---------------------------------------------------------------------------
# worst case for a concrete design

GRID_PER_JOINT = 16


def _arm_links(robot: RobotDescription) -> set:
    """Links at or below the arm mount hook."""
    start = robot.joint_map[robot.mount_hooks.arm].child
    below, frontier = {start}, [start]
    while frontier:
        parent = frontier.pop()
        for j in robot.joints:
            if j.parent == parent and j.child not in below:
                below.add(j.child)
                frontier.append(j.child)
    return below


def _layout_at(robot, q, arm_links, payload_kg, transforms=None) -> MassLayout:
    frames = transforms or link_transforms(robot, q)
    comps = []
    for link in robot.links:
        if link.mass <= 0:
            continue
        T = frames[link.name]
        com = T[:3, :3] @ link.com + T[:3, 3]
        if link.name == robot.root:
            kind = "base"
        elif link.name in arm_links:
            kind = "arm"
        else:
            kind = "structure"
        comps.append(Component(link.name, link.mass, com, kind))
    if payload_kg > 0:
        comps.append(Component("payload", payload_kg, frames[robot.tool_frame][:3, 3], "payload"))
    return MassLayout(comps, robot.base_footprint.wheels, max_payload=payload_kg)


def _nearest_zero(lo: float, hi: float) -> float:
    return float(np.clip(0.0, lo, hi))


def worst_case_config(robot: RobotDescription, payload_kg: float | None = None) -> np.ndarray:
    """Tower fully raised; two proximal arm joints gridded, the rest straight.

    Returns the configuration whose arm + payload COM reaches furthest
    forward (+x, towards the braking pivot).
    """
    payload = robot.payload_kg if payload_kg is None else payload_kg
    names = robot.dof_names
    lo, hi = robot.lower_limits, robot.upper_limits
    q = np.array([_nearest_zero(a, b) for a, b in zip(lo, hi)])
    for name in robot.torso_joints:
        q[names.index(name)] = hi[names.index(name)]
    proximal = [names.index(n) for n in robot.arm_joints[:2]]
    arm_links = _arm_links(robot)
    grids = [np.linspace(lo[i], hi[i], GRID_PER_JOINT) for i in proximal]
    best, best_x = q.copy(), -math.inf
    for values in np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, len(proximal)):
        q[proximal] = values
        frames = link_transforms(robot, q)
        mass = x = 0.0
        for link in robot.links:
            if link.name in arm_links and link.mass > 0:
                T = frames[link.name]
                mass += link.mass
                x += link.mass * (T[0, :3] @ link.com + T[0, 3])
        if payload > 0:
            mass += payload
            x += payload * frames[robot.tool_frame][0, 3]
        x = x / mass if mass > 0 else 0.0
        if x > best_x + 1e-12:
            best, best_x = q.copy(), x
    return best


def check_design(robot: RobotDescription, omega: DesignParams | None = None, *,
                 payload_kg: float | None = None, pivot_x: float | None = None,
                 reference_x: float | None = None,
                 external_torque: float = 0.0) -> FeasibilityReport:
    """Both tipover checks on the worst-case pose of ``apply_design(robot, omega)``."""
    designed = robot if omega is None else apply_design(robot, omega)
    payload = designed.payload_kg if payload_kg is None else payload_kg
    q = worst_case_config(designed, payload)
    layout = _layout_at(designed, q, _arm_links(designed), payload)
    report = dynamic_stability(layout, pivot_x, reference_x, external_torque)
    return FeasibilityReport(**{**report.__dict__, "config": q})
