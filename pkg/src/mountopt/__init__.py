"""Arm-mounting co-design for modular mobile manipulators."""
from .robot import DesignParams, DesignSpace, RobotDescription, apply_design, load_robot
from .feasibility import check_design
from .manipulability import WorkspaceGrid, global_manipulability, manipulability_measure
from .bohb import Bohb, BohbConfig, optimize

__version__ = "0.1.0"

__all__ = [
    "DesignParams", "DesignSpace", "RobotDescription", "apply_design", "load_robot",
    "check_design", "WorkspaceGrid", "global_manipulability", "manipulability_measure",
    "Bohb", "BohbConfig", "optimize",
]
