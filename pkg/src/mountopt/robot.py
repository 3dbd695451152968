"""Robot descriptions, the six-parameter mounting design space and its application."""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from ._geometry import frozen, homogeneous, rot_y, rot_z, rpy_matrix
from .exceptions import MountHookMissing, OutOfBounds, ParseError, ValidationError

DESIGN_NAMES = (
    "arm_pitch_alpha",
    "arm_yaw_beta",
    "ee_pitch_rho",
    "forward_x",
    "lateral_y",
    "tower_yaw_phi",
)
ANGULAR = frozenset({"arm_pitch_alpha", "arm_yaw_beta", "ee_pitch_rho", "tower_yaw_phi"})

_HALF_PI = math.pi / 2
DEFAULT_BOUNDS = {
    "arm_pitch_alpha": (0.0, _HALF_PI),
    "arm_yaw_beta": (-_HALF_PI, _HALF_PI),
    "ee_pitch_rho": (0.0, _HALF_PI),
    "forward_x": (-0.05, 0.15),
    "lateral_y": (-0.20, 0.20),
    "tower_yaw_phi": (-_HALF_PI, _HALF_PI),
}

JOINT_TYPES = ("revolute", "prismatic", "fixed")
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# design space


@dataclass(frozen=True)
class DesignParams:
    """One arm-mounting design. Angles in radians, lengths in meters."""

    arm_pitch_alpha: float = 0.0
    arm_yaw_beta: float = 0.0
    ee_pitch_rho: float = 0.0
    forward_x: float = 0.0
    lateral_y: float = 0.0
    tower_yaw_phi: float = 0.0

    def __post_init__(self):
        for name in DESIGN_NAMES:
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            lo, hi = DEFAULT_BOUNDS[name]
            if not (lo <= value <= hi):
                raise OutOfBounds(f"{name}={value!r} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in DESIGN_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "DesignParams":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (len(DESIGN_NAMES),):
            raise ValueError(f"expected {len(DESIGN_NAMES)} values, got {values.shape}")
        return cls(**{n: float(v) for n, v in zip(DESIGN_NAMES, values)})

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in DESIGN_NAMES}

    @classmethod
    def from_mapping(cls, data: Mapping) -> "DesignParams":
        unknown = set(data) - set(DESIGN_NAMES) - set(_ALIASES)
        if unknown:
            raise ValueError(f"unknown design parameters: {sorted(unknown)}")
        kwargs = {}
        for key, raw in data.items():
            name = _ALIASES.get(key, key)
            kwargs[name] = parse_quantity(raw, angular=name in ANGULAR, field=key)
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "DesignParams":
        """Parse ``alpha=30deg,x=0.1`` style strings (aliases accepted)."""
        data = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ValueError(f"malformed design entry {part!r}")
            key, value = part.split("=", 1)
            data[key.strip()] = value.strip()
        return cls.from_mapping(data)


_ALIASES = {
    "alpha": "arm_pitch_alpha",
    "beta": "arm_yaw_beta",
    "rho": "ee_pitch_rho",
    "x": "forward_x",
    "y": "lateral_y",
    "phi": "tower_yaw_phi",
}


@dataclass(frozen=True)
class DesignSpace:
    lower: np.ndarray
    upper: np.ndarray
    names: tuple = DESIGN_NAMES

    def __post_init__(self):
        lower, upper = frozen(self.lower), frozen(self.upper)
        if lower.shape != upper.shape or lower.shape != (len(self.names),):
            raise ValueError("bounds must match the dimension names")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def default(cls) -> "DesignSpace":
        return cls(
            lower=np.array([DEFAULT_BOUNDS[n][0] for n in DESIGN_NAMES]),
            upper=np.array([DEFAULT_BOUNDS[n][1] for n in DESIGN_NAMES]),
        )

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def encode_unit(omega: DesignParams, space: DesignSpace | None = None) -> np.ndarray:
    """Affine map of a design onto the unit cube."""
    space = space or DesignSpace.default()
    v = omega.as_array()
    if np.any(v < space.lower) or np.any(v > space.upper):
        raise OutOfBounds(f"design {omega} outside the design space")
    return (v - space.lower) / space.width


def decode_unit(u, space: DesignSpace | None = None) -> DesignParams:
    space = space or DesignSpace.default()
    u = np.asarray(u, dtype=float).ravel()
    if u.shape != (space.dim,):
        raise OutOfBounds(f"expected a {space.dim}-vector, got shape {u.shape}")
    if not np.all(np.isfinite(u)) or np.any(u < 0.0) or np.any(u > 1.0):
        raise OutOfBounds(f"unit vector {u} outside [0, 1]^{space.dim}")
    v = space.lower + u * space.width
    # lower + width can round past the upper bound
    v = np.where(u == 1.0, space.upper, v)
    return DesignParams.from_array(v)


# ---------------------------------------------------------------------------
# robot description


@dataclass(frozen=True)
class Link:
    name: str
    mass: float = 0.0
    com: np.ndarray = field(default_factory=lambda: frozen(np.zeros(3)))
    geometry: Mapping | None = None

    def __post_init__(self):
        object.__setattr__(self, "com", frozen(self.com))


@dataclass(frozen=True)
class Joint:
    name: str
    type: str
    parent: str
    child: str
    origin: np.ndarray = field(default_factory=lambda: frozen(np.eye(4)))
    axis: np.ndarray = field(default_factory=lambda: frozen([0.0, 0.0, 1.0]))
    lower: float = -math.inf
    upper: float = math.inf
    velocity: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", frozen(self.origin))
        object.__setattr__(self, "axis", frozen(self.axis))

    @property
    def movable(self) -> bool:
        return self.type != "fixed"


@dataclass(frozen=True)
class Footprint:
    half_extents: np.ndarray
    wheels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "half_extents", frozen(self.half_extents))
        object.__setattr__(self, "wheels", frozen(self.wheels))


@dataclass(frozen=True)
class MountHooks:
    tower: str
    arm: str
    ee: str


@dataclass(frozen=True, eq=False)
class RobotDescription:
    """Immutable kinematic tree with masses, limits, footprint and mount hooks.

    Joint positions are ordered as the movable joints appear in ``joints``.
    """

    name: str
    links: tuple
    joints: tuple
    base_footprint: Footprint
    mount_hooks: MountHooks
    payload_kg: float = 0.0
    ee_frame: str | None = None
    home: Mapping = field(default_factory=dict)
    drive: str = "omni"

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "home", dict(self.home))
        validate_robot(self)

    @cached_property
    def link_map(self) -> dict:
        return {link.name: link for link in self.links}

    @cached_property
    def joint_map(self) -> dict:
        return {joint.name: joint for joint in self.joints}

    @cached_property
    def parent_joint(self) -> dict:
        return {joint.child: joint for joint in self.joints}

    @cached_property
    def root(self) -> str:
        roots = [link.name for link in self.links if link.name not in self.parent_joint]
        return roots[0]

    @cached_property
    def movable_joints(self) -> tuple:
        return tuple(j for j in self.joints if j.movable)

    @cached_property
    def dof_names(self) -> tuple:
        return tuple(j.name for j in self.movable_joints)

    @property
    def dof(self) -> int:
        return len(self.movable_joints)

    @cached_property
    def lower_limits(self) -> np.ndarray:
        return frozen([j.lower for j in self.movable_joints])

    @cached_property
    def upper_limits(self) -> np.ndarray:
        return frozen([j.upper for j in self.movable_joints])

    @cached_property
    def velocity_limits(self) -> np.ndarray:
        return frozen([j.velocity for j in self.movable_joints])

    @property
    def tool_frame(self) -> str:
        return self.ee_frame or self.links[-1].name

    @cached_property
    def torso_joints(self) -> tuple:
        return tuple(j.name for j in self.movable_joints if j.type == "prismatic")

    @cached_property
    def arm_joints(self) -> tuple:
        return tuple(j.name for j in self.movable_joints if j.type == "revolute")

    @property
    def total_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    def home_config(self) -> np.ndarray:
        q = np.array([self.home.get(n, 0.0) for n in self.dof_names], dtype=float)
        return np.clip(q, self.lower_limits, self.upper_limits)

    def path_to(self, frame: str) -> list:
        """Joints from the root link down to ``frame`` (root first)."""
        from .exceptions import UnknownFrame

        if frame not in self.link_map:
            raise UnknownFrame(f"unknown frame {frame!r} in robot {self.name!r}")
        path = []
        link = frame
        while link in self.parent_joint:
            joint = self.parent_joint[link]
            path.append(joint)
            link = joint.parent
        return path[::-1]

    def replace_joint(self, joint: Joint) -> "RobotDescription":
        joints = tuple(joint if j.name == joint.name else j for j in self.joints)
        return dataclasses.replace(self, joints=joints)

    def same_as(self, other: "RobotDescription") -> bool:
        """Exact structural equality (every array compared element-wise)."""
        if (self.name, self.payload_kg, self.ee_frame, self.drive, self.mount_hooks) != (
            other.name, other.payload_kg, other.ee_frame, other.drive, other.mount_hooks
        ):
            return False
        if self.home != other.home or len(self.joints) != len(other.joints):
            return False
        for a, b in zip(self.links, other.links):
            if (a.name, a.mass) != (b.name, b.mass) or not np.array_equal(a.com, b.com):
                return False
        for a, b in zip(self.joints, other.joints):
            if (a.name, a.type, a.parent, a.child, a.lower, a.upper, a.velocity) != (
                b.name, b.type, b.parent, b.child, b.lower, b.upper, b.velocity
            ):
                return False
            if not (np.array_equal(a.origin, b.origin) and np.array_equal(a.axis, b.axis)):
                return False
        return np.array_equal(self.base_footprint.wheels, other.base_footprint.wheels) and (
            np.array_equal(self.base_footprint.half_extents, other.base_footprint.half_extents)
        )


def validate_robot(robot: RobotDescription) -> None:
    link_names = [link.name for link in robot.links]
    if len(set(link_names)) != len(link_names):
        raise ValidationError("duplicate link names")
    joint_names = [j.name for j in robot.joints]
    if len(set(joint_names)) != len(joint_names):
        raise ValidationError("duplicate joint names")
    known = set(link_names)
    children = {}
    for j in robot.joints:
        if j.type not in JOINT_TYPES:
            raise ValidationError(f"joint {j.name!r}: unknown type {j.type!r}")
        for end in (j.parent, j.child):
            if end not in known:
                raise ValidationError(f"joint {j.name!r} references unknown link {end!r}")
        if j.child in children:
            raise ValidationError(f"link {j.child!r} has two parent joints")
        children[j.child] = j
        if j.movable:
            if not (math.isfinite(j.lower) and math.isfinite(j.upper)):
                raise ValidationError(f"joint {j.name!r} needs finite position limits")
            if not j.lower < j.upper:
                raise ValidationError(f"joint {j.name!r}: lower limit must be below upper")
            if not np.isclose(np.linalg.norm(j.axis), 1.0):
                raise ValidationError(f"joint {j.name!r}: axis must be a unit vector")
    for link in robot.links:
        if link.mass < 0 or not math.isfinite(link.mass):
            raise ValidationError(f"link {link.name!r}: mass must be finite and >= 0")
    # every chain of parents must end at a root without revisiting a link
    for start in link_names:
        seen = {start}
        link = start
        while link in children:
            link = children[link].parent
            if link in seen:
                raise ValidationError(f"joint cycle through link {link!r}")
            seen.add(link)
    roots = [n for n in link_names if n not in children]
    if len(roots) != 1:
        raise ValidationError(f"expected exactly one root link, found {roots}")
    for hook in (robot.mount_hooks.tower, robot.mount_hooks.arm, robot.mount_hooks.ee):
        if hook not in joint_names:
            raise MountHookMissing(f"mount hook {hook!r} is not a joint of {robot.name!r}")
    if robot.ee_frame is not None and robot.ee_frame not in known:
        raise ValidationError(f"ee_frame {robot.ee_frame!r} is not a link")
    if robot.drive not in ("omni", "diff"):
        raise ValidationError(f"drive must be 'omni' or 'diff', got {robot.drive!r}")
    if len(robot.base_footprint.wheels) < 3:
        raise ValidationError("base footprint needs at least three wheel contacts")
    if robot.payload_kg < 0:
        raise ValidationError("payload_kg must be >= 0")


# ---------------------------------------------------------------------------
# applying a design


def apply_design(base: RobotDescription, omega: DesignParams) -> RobotDescription:
    """Return a copy of ``base`` with the mounting design applied at its hooks."""
    hooks = base.mount_hooks
    for hook in (hooks.tower, hooks.arm, hooks.ee):
        if hook not in base.joint_map:
            raise MountHookMissing(f"mount hook {hook!r} missing from {base.name!r}")

    tower = base.joint_map[hooks.tower]
    shift = homogeneous(translation=[omega.forward_x, omega.lateral_y, 0.0])
    tower_origin = shift @ tower.origin @ homogeneous(rot_z(omega.tower_yaw_phi))

    arm = base.joint_map[hooks.arm]
    back = homogeneous(translation=[-omega.forward_x, 0.0, 0.0])
    # pitch about the lateral axis first, then yaw about the tilted vertical axis
    tilt = homogeneous(rot_y(omega.arm_pitch_alpha) @ rot_z(omega.arm_yaw_beta))
    arm_origin = back @ arm.origin @ tilt

    ee = base.joint_map[hooks.ee]
    ee_origin = ee.origin @ homogeneous(rot_y(omega.ee_pitch_rho))

    robot = base
    for joint, origin in ((tower, tower_origin), (arm, arm_origin), (ee, ee_origin)):
        robot = robot.replace_joint(dataclasses.replace(joint, origin=origin))
    return robot


# ---------------------------------------------------------------------------
# file format

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([a-zA-Z]*)\s*$")


def parse_quantity(raw, *, angular: bool, field: str | None = None) -> float:
    """Numbers are SI (rad, m); strings may carry a ``deg``/``rad``/``m`` suffix."""
    label = f"{field}: " if field else ""
    if isinstance(raw, bool):
        raise ValueError(f"{label}expected a number, got {raw!r}")
    if isinstance(raw, (int, float)):
        return float(raw)
    match = _QUANTITY.match(str(raw))
    if not match:
        raise ValueError(f"{label}cannot parse quantity {raw!r}")
    value, unit = float(match.group(1)), match.group(2).lower()
    if unit == "":
        return value
    if angular:
        if unit == "rad":
            return value
        if unit == "deg":
            return math.radians(value)
    else:
        scale = {"m": 1.0, "cm": 0.01, "mm": 0.001}.get(unit)
        if scale is not None:
            return value * scale
        if unit in ("deg", "rad"):
            raise ValueError(f"{label}angle unit on a length")
    raise ValueError(f"{label}unsupported unit {unit!r}")


class _Doc:
    """YAML document that remembers the source line of every node."""

    def __init__(self, text: str, source):
        self.source = source
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ParseError(str(exc).splitlines()[0], source=source,
                             line=mark.line + 1 if mark else None) from exc
        if node is None:
            raise ParseError("empty document", source=source)
        self.lines = {}
        self._index(node, ())
        self.data = yaml.safe_load(text)

    def _index(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                self._index(value, path + (key.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, value in enumerate(node.value):
                self._index(value, path + (i,))

    def error(self, path, message):
        line = None
        for cut in range(len(path), -1, -1):
            if tuple(path[:cut]) in self.lines:
                line = self.lines[tuple(path[:cut])]
                break
        name = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in path).lstrip(".")
        return ParseError(message, source=self.source, line=line, field=name or None)

    def get(self, mapping, path, key, *, required=True, default=None):
        if not isinstance(mapping, dict):
            raise self.error(path, "expected a mapping")
        if key not in mapping:
            if required:
                raise self.error(path + (key,), "missing required field")
            return default
        return mapping[key]

    def number(self, value, path, *, angular=False):
        try:
            result = parse_quantity(value, angular=angular, field=None)
        except ValueError as exc:
            raise self.error(path, str(exc)) from None
        return result

    def vector(self, value, path, n, *, angular=False):
        if not isinstance(value, list) or len(value) != n:
            raise self.error(path, f"expected a list of {n} values")
        return [self.number(v, path + (i,), angular=angular) for i, v in enumerate(value)]


def robot_from_text(text: str, source=None) -> RobotDescription:
    doc = _Doc(text, source)
    data = doc.data
    if not isinstance(data, dict):
        raise doc.error((), "top level must be a mapping")
    version = doc.get(data, (), "schema_version")
    if version != SCHEMA_VERSION:
        raise doc.error(("schema_version",), f"unsupported schema_version {version!r}")

    links = []
    raw_links = doc.get(data, (), "links")
    if not isinstance(raw_links, list) or not raw_links:
        raise doc.error(("links",), "expected a non-empty list")
    for i, raw in enumerate(raw_links):
        path = ("links", i)
        name = doc.get(raw, path, "name")
        mass = doc.number(doc.get(raw, path, "mass", required=False, default=0.0), path + ("mass",))
        com = doc.vector(doc.get(raw, path, "com", required=False, default=[0, 0, 0]),
                         path + ("com",), 3)
        links.append(Link(str(name), mass, np.array(com), doc.get(raw, path, "geometry",
                                                                  required=False)))

    joints = []
    raw_joints = doc.get(data, (), "joints")
    if not isinstance(raw_joints, list):
        raise doc.error(("joints",), "expected a list")
    for i, raw in enumerate(raw_joints):
        path = ("joints", i)
        name = str(doc.get(raw, path, "name"))
        jtype = doc.get(raw, path, "type")
        if jtype not in JOINT_TYPES:
            raise doc.error(path + ("type",), f"type must be one of {JOINT_TYPES}")
        origin = doc.get(raw, path, "origin", required=False, default={})
        xyz = doc.vector(doc.get(origin, path + ("origin",), "xyz", required=False,
                                 default=[0, 0, 0]), path + ("origin", "xyz"), 3)
        rpy = doc.vector(doc.get(origin, path + ("origin",), "rpy", required=False,
                                 default=[0, 0, 0]), path + ("origin", "rpy"), 3, angular=True)
        axis = doc.vector(doc.get(raw, path, "axis", required=False, default=[0, 0, 1]),
                          path + ("axis",), 3)
        axis = np.asarray(axis, dtype=float)
        if np.linalg.norm(axis) == 0.0:
            raise doc.error(path + ("axis",), "axis must be non-zero")
        axis = axis / np.linalg.norm(axis)
        lower, upper, velocity = -math.inf, math.inf, math.inf
        if jtype != "fixed":
            limits = doc.get(raw, path, "limits")
            lpath = path + ("limits",)
            angular = jtype == "revolute"
            lower = doc.number(doc.get(limits, lpath, "lower"), lpath + ("lower",), angular=angular)
            upper = doc.number(doc.get(limits, lpath, "upper"), lpath + ("upper",), angular=angular)
            velocity = doc.number(doc.get(limits, lpath, "velocity", required=False,
                                          default=1.0), lpath + ("velocity",), angular=angular)
        joints.append(Joint(
            name=name,
            type=jtype,
            parent=str(doc.get(raw, path, "parent")),
            child=str(doc.get(raw, path, "child")),
            origin=homogeneous(rpy_matrix(*rpy), xyz),
            axis=axis,
            lower=lower,
            upper=upper,
            velocity=velocity,
        ))

    fp = doc.get(data, (), "base_footprint")
    footprint = Footprint(
        half_extents=np.array(doc.vector(doc.get(fp, ("base_footprint",), "half_extents"),
                                         ("base_footprint", "half_extents"), 2)),
        wheels=np.array([
            doc.vector(w, ("base_footprint", "wheels", i), 2)
            for i, w in enumerate(doc.get(fp, ("base_footprint",), "wheels"))
        ]),
    )
    hooks_raw = doc.get(data, (), "mount_hooks")
    hooks = MountHooks(*(str(doc.get(hooks_raw, ("mount_hooks",), k)) for k in ("tower", "arm", "ee")))
    payload = doc.number(doc.get(data, (), "payload_kg"), ("payload_kg",))

    joint_types = {j.name: j.type for j in joints}
    home = {}
    for key, value in (doc.get(data, (), "home", required=False, default={}) or {}).items():
        if key not in joint_types:
            raise doc.error(("home", key), "home entry for an unknown joint")
        home[key] = doc.number(value, ("home", key), angular=joint_types[key] == "revolute")

    return RobotDescription(
        name=str(doc.get(data, (), "name", required=False, default=Path(str(source)).stem)),
        links=links,
        joints=joints,
        base_footprint=footprint,
        mount_hooks=hooks,
        payload_kg=payload,
        ee_frame=doc.get(data, (), "ee_frame", required=False),
        home=home,
        drive=str(doc.get(data, (), "drive", required=False, default="omni")),
    )


def load_robot(path) -> RobotDescription:
    """Load a robot file, or a bundled description by name (e.g. ``fmm_franka``)."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        bundled = resources.files("mountopt") / "robots" / f"{path}.yaml"
        if bundled.is_file():
            return robot_from_text(bundled.read_text(), source=f"{path}.yaml")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read robot file: {exc.strerror}", source=path) from exc
    return robot_from_text(text, source=path)


def bundled_robots() -> list:
    folder = resources.files("mountopt") / "robots"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def with_drive(robot: RobotDescription, drive: str) -> RobotDescription:
    return dataclasses.replace(robot, drive=drive)


def scaled_masses(robot: RobotDescription, names: Sequence[str], factor: float) -> RobotDescription:
    links = tuple(
        dataclasses.replace(l, mass=l.mass * factor) if l.name in names else l for l in robot.links
    )
    return dataclasses.replace(robot, links=links)
