import math

import numpy as np
import pytest

from mountopt._geometry import homogeneous, rotation_log
from mountopt.exceptions import DimensionMismatch, UnknownFrame
from mountopt.kinematics import (
    IKSettings,
    KinematicChain,
    Pose,
    forward_kinematics,
    forward_kinematics_matrix,
    ik_dls,
    jacobian,
)
from mountopt.robot import Footprint, Joint, Link, MountHooks, RobotDescription

from conftest import planar_arm


def random_config(robot, rng):
    return rng.uniform(robot.lower_limits, robot.upper_limits)


def test_pure_translation_chain():
    links = [Link(n) for n in ("b", "m", "a", "e")]
    joints = [
        Joint("t", "fixed", "b", "m", homogeneous(translation=[0.1, 0.2, 0.3])),
        Joint("a", "fixed", "m", "a", homogeneous(translation=[0.5, 0.0, -0.1])),
        Joint("e", "prismatic", "a", "e", homogeneous(translation=[0.0, 0.0, 1.0]),
              axis=[1.0, 0.0, 0.0], lower=-1, upper=1),
    ]
    robot = RobotDescription("line", links, joints, Footprint([1, 1], [[1, 1], [1, -1], [-1, 0]]),
                             MountHooks("t", "a", "e"))
    pose = forward_kinematics(robot, [0.0], "e")
    assert np.allclose(pose.position, [0.6, 0.2, 1.2])
    assert np.allclose(pose.quaternion, [1, 0, 0, 0])


def test_planar_2r_elbow_up(planar2r):
    pose = forward_kinematics(planar2r, [0.0, math.pi / 2])
    assert np.allclose(pose.position, [1.0, 1.0, 0.0], atol=1e-12)


def test_periodicity(franka):
    rng = np.random.default_rng(0)
    q = random_config(franka, rng)
    shifted = q.copy()
    shifted[1] -= 2 * math.pi  # panda_joint1 value outside limits is fine for FK
    a = forward_kinematics_matrix(franka, q)
    b = forward_kinematics_matrix(franka, shifted)
    assert np.allclose(a, b, atol=1e-12)


def test_unknown_frame_and_dimension(franka):
    with pytest.raises(UnknownFrame):
        forward_kinematics(franka, franka.home_config(), "nope")
    with pytest.raises(DimensionMismatch):
        forward_kinematics(franka, np.zeros(3))


def test_fk_associativity(franka):
    rng = np.random.default_rng(1)
    q = random_config(franka, rng)
    mid = "panda_link4"
    a_c = forward_kinematics_matrix(franka, q, "tcp")
    a_b = forward_kinematics_matrix(franka, q, mid)
    b_c = forward_kinematics_matrix(franka, q, "tcp", base_frame=mid)
    assert np.allclose(a_b @ b_c, a_c, atol=1e-12)


def test_single_revolute_column():
    robot = planar_arm([0.7])
    J = jacobian(robot, [0.3])
    assert np.linalg.norm(J[:3, 0]) == pytest.approx(0.7)
    assert np.allclose(J[3:, 0], [0, 0, 1])


def test_planar_2r_stretched_is_singular(planar2r):
    J = jacobian(planar2r, [0.0, 0.0])
    assert np.linalg.matrix_rank(J[:2, :], tol=1e-12) == 1


def fd_jacobian(robot, q, eps):
    """Central differences of FK: position rows and rotation-vector rows."""
    n = len(q)
    J = np.zeros((6, n))
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = eps
        Tp = forward_kinematics_matrix(robot, q + dq)
        Tm = forward_kinematics_matrix(robot, q - dq)
        J[:3, i] = (Tp[:3, 3] - Tm[:3, 3]) / (2 * eps)
        J[3:, i] = rotation_log(Tp[:3, :3] @ Tm[:3, :3].T) / (2 * eps)
    return J


def test_jacobian_forward_difference(franka):
    rng = np.random.default_rng(2)
    eps = 1e-7
    for _ in range(100):
        q = random_config(franka, rng)
        J = jacobian(franka, q)
        T0 = forward_kinematics_matrix(franka, q)
        for i in range(franka.dof):
            dq = np.zeros(franka.dof)
            dq[i] = eps
            fd = (forward_kinematics_matrix(franka, q + dq)[:3, 3] - T0[:3, 3]) / eps
            assert np.linalg.norm(fd - J[:3, i]) < 1e-5


def test_whole_body_base_columns(franka):
    q = franka.home_config()
    J = jacobian(franka, q, joints="whole_body")
    p = forward_kinematics(franka, q).position
    assert J.shape == (6, 3 + franka.dof)
    assert np.allclose(J[:, 0], [1, 0, 0, 0, 0, 0])
    assert np.allclose(J[:, 1], [0, 1, 0, 0, 0, 0])
    assert np.allclose(J[:, 2], [-p[1], p[0], 0, 0, 0, 1])


def test_ik_already_converged(franka):
    q = franka.home_config()
    result = ik_dls(franka, forward_kinematics(franka, q), q)
    assert result.success and result.iterations == 0
    assert np.array_equal(result.q, q)


def test_ik_out_of_reach(planar2r):
    target = Pose([3.0, 0.0, 0.0])
    result = ik_dls(planar2r, target, np.array([0.1, 0.2]), joints=["j1", "j2"])
    assert not result.success


def planar_position_ik(robot, target_xy, seed):
    """Position-only IK for the planar arm (orientation follows the elbow)."""
    chain = KinematicChain(robot)
    q = np.array(seed, dtype=float)
    for _ in range(200):
        T, J = chain.fk_jacobian(q)
        e = np.asarray(target_xy) - T[:2, 3]
        if np.linalg.norm(e) < 1e-10:
            break
        Jp = J[:2]
        q += Jp.T @ np.linalg.solve(Jp @ Jp.T + 1e-4 * np.eye(2), e)
    return q


def test_ik_planar_2r_target_residual(planar2r):
    # orientation of the 2R tip is fixed by q; pick the elbow-up solution's orientation
    rng = np.random.default_rng(3)
    for seed in ([0.3, 1.0], [1.2, -1.0]):
        q_exact = planar_position_ik(planar2r, [1.0, 1.0], seed)
        target = forward_kinematics(planar2r, q_exact)
        result = ik_dls(planar2r, target, np.array(seed) + rng.normal(0, 0.05, 2))
        assert result.success
        reached = forward_kinematics(planar2r, result.q)
        assert np.linalg.norm(reached.position - [1.0, 1.0, 0.0]) < 1e-4


def test_ik_fuzz_reachable_targets(franka):
    rng = np.random.default_rng(4)
    settings = IKSettings()
    successes = 0
    for _ in range(60):
        q_true = random_config(franka, rng)
        target = forward_kinematics(franka, q_true)
        seed = np.clip(q_true + rng.normal(0, 0.3, franka.dof), franka.lower_limits,
                       franka.upper_limits)
        result = ik_dls(franka, target, seed, settings)
        if result.success:
            successes += 1
            T = forward_kinematics_matrix(franka, result.q)
            assert np.linalg.norm(T[:3, 3] - target.position) < settings.position_tolerance
            assert np.linalg.norm(rotation_log(target.rotation @ T[:3, :3].T)) < \
                settings.orientation_tolerance
            assert np.all(result.q >= franka.lower_limits)
            assert np.all(result.q <= franka.upper_limits)
    assert successes >= 40


def test_ik_deterministic(franka):
    rng = np.random.default_rng(5)
    target = forward_kinematics(franka, random_config(franka, rng))
    seed = random_config(franka, rng)
    a = ik_dls(franka, target, seed)
    b = ik_dls(franka, target, seed)
    assert np.array_equal(a.q, b.q) and a.iterations == b.iterations


def test_dls_step_respects_limits(franka):
    rng = np.random.default_rng(6)
    chain = KinematicChain(franka)
    for _ in range(50):
        q = random_config(franka, rng)
        target = forward_kinematics_matrix(franka, random_config(franka, rng))
        result = chain.ik(target, q, IKSettings(max_iterations=3))
        assert np.all(result.q >= franka.lower_limits)
        assert np.all(result.q <= franka.upper_limits)


def test_ik_batch_matches_single(franka):
    rng = np.random.default_rng(7)
    chain = KinematicChain(franka)
    seeds = np.array([random_config(franka, rng) for _ in range(5)])
    targets = np.array([chain.fk(random_config(franka, rng)) for _ in range(5)])
    Q, ok, _ = chain.ik_batch(targets, seeds)
    for i in range(5):
        single = chain.ik(targets[i], seeds[i])
        assert np.array_equal(single.q, Q[i]) and single.success == ok[i]
