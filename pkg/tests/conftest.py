import math

import numpy as np
import pytest

from mountopt.robot import (
    Footprint,
    Joint,
    Link,
    MountHooks,
    RobotDescription,
    load_robot,
)
from mountopt._geometry import homogeneous


def planar_arm(lengths=(1.0, 1.0), masses=None, drive="omni"):
    """Planar nR arm in the x-y plane, revolute about z, tool at the last tip.

    Hook joints are fixed joints so the mount machinery is exercised too.
    """
    masses = masses or [1.0] * len(lengths)
    links = [Link("base_link", 10.0), Link("mount", 0.0)]
    joints = [
        Joint("tower_mount", "fixed", "base_link", "mount"),
    ]
    parent = "mount"
    offset = 0.0
    for i, (length, mass) in enumerate(zip(lengths, masses)):
        name = f"link{i + 1}"
        links.append(Link(name, mass, np.array([length / 2, 0.0, 0.0])))
        if i == 0:
            origin = np.eye(4)
            joints.append(Joint("arm_mount", "fixed", parent, "arm_base", origin))
            links.append(Link("arm_base", 0.0))
            parent = "arm_base"
        joints.append(Joint(
            f"j{i + 1}", "revolute", parent, name,
            homogeneous(translation=[offset, 0.0, 0.0]),
            lower=-math.pi * 2, upper=math.pi * 2, velocity=2.0,
        ))
        parent, offset = name, length
    links.append(Link("tool", 0.0))
    joints.append(Joint("ee_mount", "fixed", parent, "tool",
                        homogeneous(translation=[offset, 0.0, 0.0])))
    return RobotDescription(
        name="planar",
        links=links,
        joints=joints,
        base_footprint=Footprint([0.3, 0.2], [[0.25, 0.15], [0.25, -0.15], [-0.25, -0.15],
                                              [-0.25, 0.15]]),
        mount_hooks=MountHooks("tower_mount", "arm_mount", "ee_mount"),
        payload_kg=0.0,
        ee_frame="tool",
        drive=drive,
    )


@pytest.fixture(scope="session")
def franka():
    return load_robot("fmm_franka")


@pytest.fixture(scope="session")
def ur5():
    return load_robot("fmm_ur5")


@pytest.fixture
def planar2r():
    return planar_arm()
