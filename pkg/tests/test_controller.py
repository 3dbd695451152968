import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mountopt._geometry import homogeneous
from mountopt.controller import (
    GAIN_BOUNDS,
    REST_HEIGHT,
    ControllerGains,
    TaskScore,
    cem_schedule,
    control_step,
    episodes_for,
    mean_rate,
    rest_posture,
    score_design,
    success_rates,
    training_episodes,
    tune_policy,
)
from mountopt.exceptions import BudgetTooSmall, UnknownTask, ValidationError
from mountopt.kinematics import KinematicChain
from mountopt.robot import DesignParams, scaled_masses
from mountopt.sim import SimState, StepContext, base_matrix
from mountopt.tasks import EETrajectory
from mountopt.world import OccupancyMap, Rect


def context(robot, target, obstacles=()):
    occ = OccupancyMap(obstacles=obstacles)
    traj = EETrajectory.from_poses([target])
    return StepContext(traj, occ, occ.occupied_centers(), 0.0, robot)


def rest_geometry(robot):
    q = rest_posture(robot)
    p = KinematicChain(robot).fk(q)[:3, 3]
    return q, p, math.hypot(p[0], p[1]), math.atan2(p[1], p[0])


def test_gains_are_bounded():
    with pytest.raises(ValidationError):
        ControllerGains(speed_scale=1.5)
    with pytest.raises(ValidationError):
        ControllerGains(repulsion=0.0)
    clipped = ControllerGains.from_array([100.0] * len(GAIN_BOUNDS))
    assert clipped.speed_scale == 1.0


def test_rest_posture_is_clear_and_in_band(franka):
    q, p, reach, _ = rest_geometry(franka)
    assert REST_HEIGHT[0] <= p[2] <= REST_HEIGHT[1]
    assert reach >= max(franka.base_footprint.half_extents)
    assert np.all(q >= franka.lower_limits) and np.all(q <= franka.upper_limits)
    assert np.array_equal(q, rest_posture(franka))


def test_equilibrium_gives_zero_commands(franka):
    q, p, reach, _ = rest_geometry(franka)
    state = SimState(base=(0.0, 0.0, 0.0), q=q)
    target = base_matrix(state.base) @ KinematicChain(franka).fk(q)
    gains = ControllerGains(standoff=reach)
    twist, torso, speed = control_step(state, context(franka, target), gains)
    assert np.allclose(twist, 0.0, atol=1e-9)
    assert abs(torso) < 1e-9 and speed == 0.0


def test_target_ahead_needs_no_rotation(franka):
    q, p, reach, heading = rest_geometry(franka)
    state = SimState(base=(0.0, 0.0, 0.0), q=q)
    ahead = p + np.array([math.cos(heading), math.sin(heading), 0.0])
    target = homogeneous(KinematicChain(franka).fk(q)[:3, :3], ahead)
    twist, _, _ = control_step(state, context(franka, target), ControllerGains(standoff=reach))
    vx, vy, w = twist
    assert abs(w) < 1e-9
    # the base moves straight along the reach direction, towards the target
    assert vx * math.cos(heading) + vy * math.sin(heading) > 0
    assert abs(-vx * math.sin(heading) + vy * math.cos(heading)) < 1e-9


def test_obstacle_on_the_line_deflects(franka):
    q, p, reach, heading = rest_geometry(franka)
    state = SimState(base=(0.0, 0.0, 0.0), q=q)
    u = np.array([math.cos(heading), math.sin(heading)])
    ahead = p + np.r_[2.0 * u, 0.0]
    target = homogeneous(KinematicChain(franka).fk(q)[:3, :3], ahead)
    gains = ControllerGains(standoff=reach)
    free, _, _ = control_step(state, context(franka, target), gains)
    front = max(franka.base_footprint.half_extents)
    c = (front + 0.3) * u
    block = Rect.around(c[0], c[1], 0.05, 0.05)
    twist, _, _ = control_step(state, context(franka, target, [block]), gains)
    perp = lambda t: -t[0] * u[1] + t[1] * u[0]  # noqa: E731
    assert abs(perp(free)) < 1e-9
    assert abs(perp(twist)) > 1e-3


@settings(max_examples=10, deadline=None)
@given(x=st.floats(-1, 1), y=st.floats(-1, 1), yaw=st.floats(-3, 3))
def test_control_step_is_time_invariant(franka, x, y, yaw):
    q = rest_posture(franka)
    target = homogeneous(np.eye(3), [1.0, 0.5, 0.9])
    ctx = context(franka, target)
    a = control_step(SimState(base=(x, y, yaw), q=q, time=0.0, steps=0), ctx, ControllerGains())
    b = control_step(SimState(base=(x, y, yaw), q=q, time=7.3, steps=365), ctx, ControllerGains())
    assert a == b


def test_control_step_needs_the_robot(franka):
    ctx = StepContext(EETrajectory.from_poses([np.eye(4)]), OccupancyMap(), np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        control_step(SimState((0, 0, 0), rest_posture(franka)), ctx, ControllerGains())


@pytest.mark.parametrize("budget, expected", [(8, (1, 1)), (32, (2, 2)), (72, (3, 3)),
                                              (64 * 8, (8, 8)), (1000, (8, 15))])
def test_cem_schedule(budget, expected):
    iters, per = cem_schedule(budget)
    assert (iters, per) == expected
    # the initial evaluation plus (population - 1) fresh candidates per iteration
    assert per + iters * 7 * per <= budget


def test_cem_schedule_with_fixed_episodes():
    assert cem_schedule(8 * 1 * 3, episodes_per=3) == (1, 3)
    with pytest.raises(BudgetTooSmall):
        cem_schedule(7)
    with pytest.raises(BudgetTooSmall):
        cem_schedule(16, episodes_per=3)


def test_tuning_is_deterministic_and_elitist(franka):
    a = tune_policy(franka, ["RandomGoal"], 8, seed=2)
    b = tune_policy(franka, ["RandomGoal"], 8, seed=2)
    assert a == b and a.iterations == 1 and a.episodes_used <= 8
    train = training_episodes(["RandomGoal"], 1, seed=2)
    initial = mean_rate(success_rates(franka, train, ControllerGains()))
    assert mean_rate(success_rates(franka, train, a.gains)) >= initial


def test_training_and_validation_streams_differ():
    train = training_episodes(["Drawer"], 5, seed=0)
    val = episodes_for(["Drawer"], 5, seed=0)
    assert not {e.signature() for e in train} & {e.signature() for e in val}


def test_unknown_task_in_tuning(franka):
    with pytest.raises(UnknownTask):
        episodes_for(["Swim"], 1)


def test_score_is_mean_of_rates():
    assert mean_rate({"RandomGoal": 1.0, "Drawer": 0.5}) == 0.75
    assert mean_rate({}) == 0.0


def test_infeasible_design_scores_zero(franka):
    heavy = scaled_masses(franka, [l.name for l in franka.links if l.name != "base_link"], 8.0)
    out = score_design(heavy, DesignParams(forward_x=0.15, arm_pitch_alpha=math.pi / 2),
                       ["RandomGoal"], 8)
    assert isinstance(out, TaskScore)
    assert out.score == 0.0 and not out.feasible and out.episodes_used == 0


def test_zero_reach_robot_scores_zero(planar2r):
    import dataclasses
    from mountopt.robot import Joint
    stub = dataclasses.replace(planar2r, joints=tuple(
        dataclasses.replace(j, origin=np.eye(4)) if isinstance(j, Joint) else j
        for j in planar2r.joints))
    out = score_design(stub, None, ["RandomGoal"], 8, validation_episodes=3,
                       check_feasibility=False)
    assert out.score == 0.0


def test_score_design_reports_rates(franka):
    out = score_design(franka, DesignParams(), ["RandomGoal", "Drawer"], 8, seed=1,
                       validation_episodes=2)
    assert set(out.rates) == {"RandomGoal", "Drawer"}
    assert out.score == pytest.approx(mean_rate(out.rates))
    assert out.to_dict()["gains"] == out.gains.to_dict()
