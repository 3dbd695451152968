import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Point, Polygon

from mountopt.exceptions import EmptyLayout, ValidationError
from mountopt.feasibility import (
    BRAKING_DECEL,
    FMM_QUOTED_REFERENCE_X,
    FMM_WHEELS,
    Component,
    MassLayout,
    center_of_mass,
    check_design,
    dynamic_stability,
    fmm_worst_case_layout,
    static_stability,
    support_margin,
)
from mountopt.robot import DesignParams, decode_unit, load_robot, scaled_masses

SQUARE = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


def layout_of(*items, wheels=SQUARE, decel=2.2):
    comps = [Component(f"c{i}", m, np.array(p, float), k) for i, (m, p, k) in enumerate(items)]
    return MassLayout(comps, wheels, decel=decel)


def test_fmm_center_of_mass():
    com = center_of_mass(fmm_worst_case_layout())
    assert abs(com[0] - 0.132) <= 0.002 and abs(com[1] - 0.109) <= 0.002


def test_fmm_torques():
    report = dynamic_stability(fmm_worst_case_layout(), reference_x=FMM_QUOTED_REFERENCE_X)
    assert report.pivot_x == 0.319
    assert report.tau_critical == pytest.approx(231.76, abs=0.1)
    assert report.tau_grav == pytest.approx(136.8, rel=0.15)
    assert report.tau_acc == pytest.approx(21.6, rel=0.15)
    assert report.statically_stable and report.dynamically_stable


def test_fmm_static_margin_matches_shapely():
    layout = fmm_worst_case_layout()
    stable, margin = static_stability(layout)
    com = center_of_mass(layout)
    oracle = Polygon(FMM_WHEELS).exterior.distance(Point(com[:2]))
    assert stable and margin > 0.16
    assert margin == pytest.approx(oracle, abs=1e-12)


def test_default_braking_decel():
    assert BRAKING_DECEL == pytest.approx(2.2)
    assert MassLayout([], SQUARE).decel == pytest.approx(2.2)


def test_trivial_coms():
    assert np.array_equal(center_of_mass(layout_of((2.0, (0, 0, 0), "base"))), np.zeros(3))
    com = center_of_mass(layout_of((1.5, (0.3, -0.2, 0.4), "arm"),
                                   (1.5, (-0.3, 0.2, -0.4), "arm")))
    assert np.allclose(com, 0.0, atol=1e-15)
    with pytest.raises(EmptyLayout):
        center_of_mass(MassLayout([], SQUARE))


def test_boundary_and_outside():
    stable, margin = static_stability(layout_of((1.0, (1.0, 0.0, 0.0), "base")))
    assert margin == 0.0 and not stable
    stable, margin = static_stability(layout_of((1.0, (2.0, 0.0, 0.0), "base")))
    assert not stable and margin == pytest.approx(-1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_margin_matches_shapely(x, y, seed):
    rng = np.random.default_rng(seed)
    wheels = rng.uniform(-1, 1, size=(6, 2))
    poly = Polygon(wheels).convex_hull
    if poly.area < 1e-3:
        return
    margin = support_margin([x, y], wheels)
    dist = poly.exterior.distance(Point(x, y))
    assert abs(margin) == pytest.approx(dist, abs=1e-9)
    if dist > 1e-9:
        assert (margin > 0) == poly.contains(Point(x, y))


def test_rejects_bad_layouts():
    with pytest.raises(ValidationError):
        Component("x", 0.0, np.zeros(3))
    with pytest.raises(ValidationError):
        MassLayout([], SQUARE[:2])
    with pytest.raises(ValidationError):
        MassLayout([], SQUARE, decel=-1.0)


def test_zero_decel_gives_zero_acc_torque():
    layout = dataclasses.replace(fmm_worst_case_layout(), decel=0.0)
    assert dynamic_stability(layout).tau_acc == 0.0


def test_critical_torque_linear_in_base_mass_and_distance():
    def crit(m_base, ref):
        layout = layout_of((m_base, (0.0, 0.0, 0.1), "base"), (1.0, (0.2, 0.0, 0.5), "arm"))
        return dynamic_stability(layout, pivot_x=1.0, reference_x=ref).tau_critical

    assert crit(20.0, 0.5) == pytest.approx(2 * crit(10.0, 0.5), rel=1e-12)
    # d = 1 - ref
    assert crit(10.0, 0.0) == pytest.approx(2 * crit(10.0, 0.5), rel=1e-12)
    assert crit(10.0, 0.5) == pytest.approx(10.0 * 9.81 * 0.5, rel=1e-12)


def test_grav_torque_split_invariance():
    whole = layout_of((10.0, (0, 0, 0.1), "base"), (2.0, (0.4, 0.1, 0.8), "arm"))
    split = layout_of((10.0, (0, 0, 0.1), "base"), (1.0, (0.4, 0.1, 0.8), "arm"),
                      (1.0, (0.4, 0.1, 0.8), "arm"))
    a, b = dynamic_stability(whole), dynamic_stability(split)
    assert a.tau_grav == pytest.approx(b.tau_grav, rel=1e-12)
    assert a.tau_acc == pytest.approx(b.tau_acc, rel=1e-12)


def test_closed_form_single_arm_mass():
    layout = layout_of((10.0, (0, 0, 0.1), "base"), (2.0, (0.6, 0.0, 0.8), "arm"))
    r = dynamic_stability(layout, pivot_x=1.0, reference_x=0.2)
    assert r.tau_grav == pytest.approx(2.0 * 9.81 * 0.4, rel=1e-12)
    assert r.tau_acc == pytest.approx(2.0 * 2.2 * 0.8 * 0.4 / math.hypot(0.4, 0.8), rel=1e-12)


def test_external_torque_can_flip_stability():
    layout = fmm_worst_case_layout()
    base = dynamic_stability(layout, reference_x=FMM_QUOTED_REFERENCE_X)
    pulled = dynamic_stability(layout, reference_x=FMM_QUOTED_REFERENCE_X, external_torque=30.0)
    assert pulled.tau_max == pytest.approx(base.tau_max + 30.0)
    huge = dynamic_stability(layout, reference_x=FMM_QUOTED_REFERENCE_X,
                             external_torque=base.margin + 1.0)
    assert not huge.dynamically_stable


def test_pivot_outside_footprint_rejected():
    with pytest.raises(ValidationError):
        dynamic_stability(fmm_worst_case_layout(), pivot_x=0.5)


def test_default_design_feasible(franka):
    report = check_design(franka, DesignParams())
    assert report.statically_stable and report.dynamically_stable


def test_heavy_payload_at_max_forward_unstable(franka):
    omega = DesignParams(forward_x=0.15)
    assert check_design(franka, omega).dynamically_stable
    report = check_design(franka, omega, payload_kg=10 * franka.payload_kg)
    assert not report.dynamically_stable
    assert report.tau_max > report.tau_critical


def test_worst_case_raises_tower(franka):
    report = check_design(franka, DesignParams())
    i = franka.dof_names.index(franka.torso_joints[0])
    assert report.config[i] == franka.upper_limits[i]


def test_zero_mass_arm_trivially_stable(franka):
    arm = [l.name for l in franka.links if l.name.startswith("panda") or l.name == "tcp"]
    light = scaled_masses(franka, arm, 0.0)
    report = check_design(light, DesignParams(forward_x=0.15, arm_pitch_alpha=math.pi / 2),
                          payload_kg=0.0)
    assert report.tau_grav == 0.0 and report.tau_acc == 0.0
    assert report.feasible


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6), st.floats(0.05, 0.95),
       st.sampled_from(["panda_link2", "panda_link4", "panda_link6", "panda_hand"]))
def test_lighter_arm_never_destabilizes(u, factor, link):
    robot = load_robot("fmm_franka")
    omega = decode_unit(np.array(u))
    heavy = check_design(robot, omega, payload_kg=15.0)
    light = check_design(scaled_masses(robot, [link], factor), omega, payload_kg=15.0)
    if heavy.dynamically_stable:
        assert light.dynamically_stable
    assert light.margin >= heavy.margin - 1e-9
