"""Design-conditioned whole-body reference controller, its tuner, and the
task-success score of a design.

The controller tracks the end-effector reference with one damped IK step
per tick (done by the simulator) while steering the base so that the
reference stays near the arm's nominal reach, and raising or lowering the
torso to the reference height.  Six gains are tuned per design by a
cross-entropy search over a fixed set of training episodes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ._kernels import nearest_obstacle
from .exceptions import BudgetTooSmall, UnknownTask, ValidationError
from .feasibility import check_design
from .kinematics import KinematicChain
from .manipulability import manipulability_measure
from .robot import DesignParams, RobotDescription, apply_design
from ._kernels import local_box_hits
from ._rollout import FAILURES, episode_kernel, pack_stages
from .sim import (DT, EE_RADIUS, IK_DAMPING, Command, Failure, SimState, _result, _self_boxes,
                  integrate_base, run_episode)
from .tasks import ROTATION_LENGTH, TASKS, TaskConfig, sample_episode

# EE path speed falls to zero once the tracking residual reaches 1/K_RESIDUAL
K_RESIDUAL = 20.0
MAX_BASE_SPEED = 1.1
MAX_YAW_RATE = 1.0
REPULSION_RANGE = 0.5
DIFF_LOOKAHEAD = 0.1
TANGENTIAL = 1.0
# below this footprint clearance (m) no motion towards the obstacle is allowed
CLEARANCE = 0.05
COMFORT = 0.5


@dataclass(frozen=True)
class ControllerGains:
    base_gain: float = 1.0      # 1/s, base position error to velocity
    standoff: float = 0.6       # m, horizontal base-to-EE distance to hold
    torso_gain: float = 1.0     # 1/s
    speed_scale: float = 0.8    # fraction of the nominal EE path speed
    repulsion: float = 0.2      # m/s push at contact, fading to 0 at the range edge
    lookahead: float = 0.3      # m of path ahead used to place the base

    def __post_init__(self):
        for f in fields(self):
            lo, hi = GAIN_BOUNDS[f.name]
            v = float(getattr(self, f.name))
            if not (lo <= v <= hi):
                raise ValidationError(f"{f.name}={v} outside [{lo}, {hi}]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in GAIN_NAMES])

    @classmethod
    def from_array(cls, values) -> "ControllerGains":
        v = np.clip(np.asarray(values, dtype=float), GAIN_LOWER, GAIN_UPPER)
        return cls(*map(float, v))

    def to_dict(self) -> dict:
        return asdict(self)


GAIN_BOUNDS = {
    "base_gain": (0.1, 4.0),
    "standoff": (0.1, 1.2),
    "torso_gain": (0.1, 5.0),
    "speed_scale": (0.1, 1.0),
    "repulsion": (0.01, 2.0),
    "lookahead": (0.01, 1.0),
}
GAIN_NAMES = tuple(GAIN_BOUNDS)
GAIN_LOWER = np.array([GAIN_BOUNDS[n][0] for n in GAIN_NAMES])
GAIN_UPPER = np.array([GAIN_BOUNDS[n][1] for n in GAIN_NAMES])


def _clip(v: float, bound: float) -> float:
    return float(min(max(v, -bound), bound))


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


REST_SAMPLES = 512
REST_SIGMA = 0.5      # rad, spread of the candidates around home
# rest end-effector must sit clear of the footprint, within this height band
REST_HEIGHT = (0.5, 1.4)
REST_REACH = 0.15
_REST_CACHE: dict = {}


def rest_posture(robot: RobotDescription, samples: int = REST_SAMPLES, seed: int = 0) -> np.ndarray:
    """Most dexterous of ``samples`` arm postures scattered around home.

    The same rule runs for every design, the stock mount included, so a
    tilted arm is not judged from a posture chosen for an upright one.

    Candidates must put the end effector beyond the footprint by
    ``REST_REACH`` and inside ``REST_HEIGHT``, without touching the robot's
    fixed bodies.  The score is the arm manipulability times the geometric
    mean of each joint's normalised distance to its limits.  The home
    posture competes too, and wins if nothing qualifies.
    """
    key = (id(robot), samples, seed)
    hit = _REST_CACHE.get(key)
    if hit is not None and hit[0] is robot:
        return hit[1].copy()
    chain = KinematicChain(robot)
    names = robot.dof_names
    arm = np.array([n in robot.arm_joints for n in names])
    lo, hi = robot.lower_limits, robot.upper_limits
    bounded = np.isfinite(lo) & np.isfinite(hi)
    q_home = robot.home_config()
    if not arm.any():
        return q_home
    rng = np.random.default_rng(seed)
    cands = np.repeat(q_home[None, :], samples + 1, axis=0)
    cands[1:, arm] += rng.normal(0.0, REST_SIGMA, (samples, int(arm.sum())))
    cands = np.clip(cands, lo, hi)
    boxes = _self_boxes(robot)
    clear = float(np.max(robot.base_footprint.half_extents)) + REST_REACH
    best, best_score = q_home, -1.0
    for q in cands:
        T, J = chain.fk_jacobian(q)
        p = T[:3, 3]
        if not (REST_HEIGHT[0] <= p[2] <= REST_HEIGHT[1]) or math.hypot(p[0], p[1]) < clear:
            continue
        if local_box_hits(np.ascontiguousarray(p), 2 * EE_RADIUS, *boxes):
            continue
        margin = np.ones_like(q)
        margin[bounded] = (4 * (q - lo) * (hi - q))[bounded] / (hi - lo)[bounded] ** 2
        score = manipulability_measure(J[:, arm]) * float(np.prod(np.clip(margin[arm], 0, 1))
                                                          ** (1 / arm.sum()))
        if score > best_score:
            best, best_score = q, score
    if len(_REST_CACHE) > 64:
        _REST_CACHE.clear()
    _REST_CACHE[key] = (robot, best.copy())
    return best.copy()


class BoundController:
    """Controller specialised to one robot; ``command`` runs every tick."""

    def __init__(self, robot: RobotDescription, gains: ControllerGains):
        self.robot = robot
        self.gains = gains
        names = robot.dof_names
        self.torso_index = [names.index(n) for n in robot.torso_joints]
        q_home = rest_posture(robot)
        self.torso_home = q_home[self.torso_index].copy()
        self.chain = KinematicChain(robot)
        self.q_home = q_home
        self.start_config = q_home
        self.arm_mask = np.array([n in robot.arm_joints for n in names])
        T_home = self.chain.fk(q_home)
        p_home = T_home[:3, 3]
        self.R_home = T_home[:3, :3]
        self.z_home = float(p_home[2])
        self.heading = math.atan2(p_home[1], p_home[0]) if np.hypot(*p_home[:2]) > 1e-9 else 0.0
        self.nominal = gains.standoff * np.array([math.cos(self.heading), math.sin(self.heading)])
        vel = robot.velocity_limits[self.torso_index]
        self.torso_speed = float(vel[0]) if len(vel) and np.isfinite(vel[0]) else 0.2
        self.half = np.asarray(robot.base_footprint.half_extents, dtype=float)
        self.drive = robot.drive

    def _avoid(self, vx, vy, x, y, yaw, points) -> tuple:
        """Cancel motion into the nearest obstacle, slide along it, and keep clear."""
        if len(points) == 0:
            return vx, vy
        d, nx, ny = nearest_obstacle(x, y, yaw, self.half[0], self.half[1], points,
                                     REPULSION_RANGE)
        if not math.isfinite(d):
            return vx, vy
        closeness = min(1.0, (REPULSION_RANGE - d) / (REPULSION_RANGE - CLEARANCE))
        into = vx * nx + vy * ny
        if into > 0:
            side = 1.0 if -vx * ny + vy * nx >= 0 else -1.0
            slide = closeness * TANGENTIAL * into * side
            vx += -closeness * into * nx - slide * ny
            vy += -closeness * into * ny + slide * nx
        push = self.gains.repulsion * closeness
        return vx - push * nx, vy - push * ny

    def _safe(self, pose, twist, occupancy):
        """Drop rotation, then translation, if the next base pose would collide."""
        for cand in (twist, (twist[0], twist[1], 0.0), (0.0, 0.0, twist[2])):
            nxt = integrate_base(pose, cand, DT, self.drive)
            if not occupancy.footprint_collides(nxt, self.half):
                return cand
        return (0.0, 0.0, 0.0)

    def command(self, state, ctx) -> Command:
        g = self.gains
        traj = ctx.trajectory
        s = state.progress
        goal = traj.at(s + g.lookahead)
        x, y, yaw = state.base
        c, sn = math.cos(yaw), math.sin(yaw)
        gx, gy = goal[0, 3] - x, goal[1, 3] - y

        # EE displacement the arm would make returning home; the base and torso
        # take it over so the arm can stay near its home posture
        _, J = self.chain.fk_jacobian(state.q)
        d = J[:, self.arm_mask] @ (self.q_home - state.q)[self.arm_mask]
        ox = self.nominal[0] * g.base_gain + COMFORT * d[0]
        oy = self.nominal[1] * g.base_gain + COMFORT * d[1]
        vx = g.base_gain * gx - (c * ox - sn * oy)
        vy = g.base_gain * gy - (sn * ox + c * oy)
        vx, vy = self._avoid(vx, vy, x, y, yaw, ctx.obstacle_points)
        speed = math.hypot(vx, vy)
        if speed > MAX_BASE_SPEED:
            vx, vy = vx * MAX_BASE_SPEED / speed, vy * MAX_BASE_SPEED / speed
        dist = math.hypot(gx, gy)
        turn = 0.0
        if dist > 1e-9:
            # face the target with the arm's home reach direction
            turn = _wrap(math.atan2(gy, gx) - self.heading - yaw)
            turn *= min(1.0, dist / max(g.standoff, 1e-3))
        w = _clip(g.base_gain * turn - COMFORT * d[5], MAX_YAW_RATE)

        if self.drive == "diff":
            # steer a point ahead of the axle; the lateral command is lost
            twist = (c * vx + sn * vy, 0.0, _clip((-sn * vx + c * vy) / DIFF_LOOKAHEAD, MAX_YAW_RATE))
        else:
            twist = (c * vx + sn * vy, -sn * vx + c * vy, w)
        twist = self._safe(state.base, twist, ctx.occupancy)

        torso = 0.0
        if self.torso_index:
            z_nom = self.z_home + float(state.q[self.torso_index[0]] - self.torso_home[0])
            torso = _clip(g.torso_gain * (goal[2, 3] - z_nom) - COMFORT * d[2], self.torso_speed)

        if s >= traj.length:
            ee_speed = 0.0
        else:
            ee_speed = traj.speed_at(s) * g.speed_scale * max(0.0, 1.0 - K_RESIDUAL * ctx.residual)
        return Command(twist, torso, ee_speed)

    def rollout(self, sim, episode, state, traj, dt):
        """The tick loop of ``run_episode`` with this controller, compiled."""
        c = sim.chain
        dp, w, _, cum = traj._segments
        lo, hi = sim.occupancy.bounds
        consts = np.array([K_RESIDUAL, MAX_BASE_SPEED, MAX_YAW_RATE, REPULSION_RANGE,
                           TANGENTIAL, CLEARANCE, COMFORT, DIFF_LOOKAHEAD])
        torso_home = float(self.torso_home[0]) if self.torso_index else 0.0
        out = episode_kernel(
            c._origins, c._kinds, c._axes, c._qidx, sim.active, sim.lower, sim.upper,
            sim.velocity * dt, np.array(sim.torso_index, dtype=np.int64), *sim.boxes,
            sim.ee_radius, sim.thresholds[0], sim.thresholds[1], IK_DAMPING,
            np.asarray(lo, dtype=float), np.asarray(hi, dtype=float),
            *pack_stages(sim.occupancy, episode.events),
            traj.positions, traj.rotations, dp, w, cum, traj.speeds,
            self.gains.as_array(), self.q_home, self.arm_mask, self.nominal, self.heading,
            self.z_home, torso_home, self.torso_speed, float(self.half[0]), float(self.half[1]),
            self.drive == "diff", consts, ROTATION_LENGTH,
            np.array(state.base, dtype=float), np.array(state.q, dtype=float),
            int(episode.horizon), float(dt), DT)
        code, step, steps, progress, max_te, max_re, sum_te = out
        end = SimState(state.base, state.q, progress=progress, steps=steps,
                       max_translation_error=max_te, max_rotation_error=max_re,
                       sum_translation_error=sum_te)
        failure = Failure(FAILURES[code], step) if code else None
        return _result(episode, end, code == 0, failure, traj)


@dataclass(frozen=True)
class WholeBodyController:
    gains: ControllerGains = ControllerGains()

    def bind(self, robot: RobotDescription) -> BoundController:
        return BoundController(robot, self.gains)


def control_step(state, ctx, gains: ControllerGains) -> tuple:
    """(body twist, torso velocity, EE path speed) for one tick.

    Pure in ``state`` and ``ctx``; the robot comes from ``ctx.robot``.
    """
    if ctx.robot is None:
        raise ValidationError("the step context carries no robot")
    cmd = BoundController(ctx.robot, gains).command(state, ctx)
    return cmd.base, cmd.torso, cmd.ee_speed


# ---------------------------------------------------------------------------
# tuning and scoring


def episodes_for(tasks, count: int, config: TaskConfig | None = None, seed: int = 0) -> list:
    """``count`` episodes of every task in ``tasks``, deterministic in ``seed``."""
    for t in tasks:
        if t not in TASKS:
            raise UnknownTask(t)
    return [sample_episode(t, config, seed * 100_003 + k) for t in tasks for k in range(count)]


def success_counts(robot: RobotDescription, episodes, gains: ControllerGains) -> dict:
    """{task: (successes, episodes)} of ``gains`` on ``robot``."""
    ctrl = WholeBodyController(gains)
    hits: dict = {}
    for ep in episodes:
        ok = run_episode(robot, ep, ctrl).success
        k, n = hits.get(ep.task, (0, 0))
        hits[ep.task] = (k + int(ok), n + 1)
    return hits


def success_rates(robot: RobotDescription, episodes, gains: ControllerGains) -> dict:
    """Per-task success rate of ``gains`` on ``robot`` over ``episodes``."""
    return {t: k / n for t, (k, n) in success_counts(robot, episodes, gains).items()}


def mean_rate(rates: dict) -> float:
    return float(np.mean(list(rates.values()))) if rates else 0.0


@dataclass(frozen=True)
class TuningResult:
    gains: ControllerGains
    train_success: float
    episodes_used: int
    iterations: int


def cem_schedule(budget: int, population: int = 8, episodes_per: int | None = None) -> tuple:
    """(iterations, episodes per candidate) that fit in ``budget`` episodes.

    By default the budget is split so that iterations and episodes per
    candidate grow together (iterations = isqrt(budget // population), at most 8).
    """
    budget, population = int(budget), int(population)
    if population < 2:
        raise ValidationError("population must be at least 2")
    if budget < population:
        raise BudgetTooSmall(f"budget {budget} < population {population}")
    n = budget // population
    if episodes_per is None:
        iterations = min(8, max(1, math.isqrt(n)))
        return iterations, n // iterations
    if episodes_per < 1 or n < episodes_per:
        raise BudgetTooSmall(f"budget {budget} < population x episodes_per")
    return min(8, n // episodes_per), int(episodes_per)


def training_episodes(tasks, count: int, config: TaskConfig | None = None, seed: int = 0) -> list:
    """``count`` episodes cycling through ``tasks``."""
    tasks = tuple(tasks)
    for t in tasks:
        if t not in TASKS:
            raise UnknownTask(t)
    return [sample_episode(tasks[k % len(tasks)], config, 7_919 * seed + 1_000_003 + k)
            for k in range(count)]


def tune_policy(robot: RobotDescription, tasks, budget: int, *, seed: int = 0,
                population: int = 8, episodes_per: int | None = None,
                config: TaskConfig | None = None,
                initial: ControllerGains | None = None) -> TuningResult:
    """Cross-entropy search of the controller gains within ``budget`` episodes.

    Every candidate is scored on the same training episodes, so budget buys
    iterations and evaluation precision, never a different objective.  The
    first population contains ``initial`` and the best candidate so far is
    carried over unevaluated, so the result never scores below ``initial``.
    """
    iterations, per = cem_schedule(budget, population, episodes_per)
    train = training_episodes(tasks, per, config, seed)

    def fitness(gains):
        return mean_rate(success_rates(robot, train, gains))

    rng = np.random.default_rng(seed)
    width = GAIN_UPPER - GAIN_LOWER
    best = initial or ControllerGains()
    best_score = fitness(best)
    used = per
    mean, std = best.as_array(), 0.3 * width
    n_elite = max(2, population // 4)
    for _ in range(iterations):
        cand = np.clip(rng.normal(mean, std, size=(population - 1, len(mean))),
                       GAIN_LOWER, GAIN_UPPER)
        cand = np.vstack([best.as_array(), cand])
        scores = [best_score]
        for c in cand[1:]:
            scores.append(fitness(ControllerGains.from_array(c)))
            used += per
        order = np.argsort(-np.array(scores), kind="stable")
        elite = cand[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), 0.02 * width)
        if scores[order[0]] > best_score:
            best, best_score = ControllerGains.from_array(cand[order[0]]), scores[order[0]]
    return TuningResult(best, best_score, used, iterations)


@dataclass(frozen=True)
class TaskScore:
    score: float
    rates: dict
    feasible: bool
    gains: ControllerGains | None
    episodes_used: int

    def to_dict(self) -> dict:
        return {"score": self.score, "rates": dict(self.rates), "feasible": self.feasible,
                "gains": self.gains.to_dict() if self.gains else None,
                "episodes_used": self.episodes_used}


def score_design(robot: RobotDescription, omega: DesignParams | None, tasks, budget: int, *,
                 seed: int = 0, validation_episodes: int = 50,
                 config: TaskConfig | None = None, check_feasibility: bool = True,
                 train_tasks=None) -> TaskScore:
    """Tune the controller for the design, then report its mean validation success.

    Tuning runs on ``train_tasks`` (default: the validation tasks).  Infeasible
    designs (tipover) score 0 without any rollouts.
    """
    designed = robot if omega is None else apply_design(robot, omega)
    if check_feasibility and not check_design(designed).feasible:
        return TaskScore(0.0, {t: 0.0 for t in tasks}, False, None, 0)
    tuned = tune_policy(designed, tasks if train_tasks is None else train_tasks, budget,
                        seed=seed, config=config)
    val = episodes_for(tasks, validation_episodes, config, seed=seed)
    rates = success_rates(designed, val, tuned.gains)
    return TaskScore(mean_rate(rates), rates, True, tuned.gains,
                     tuned.episodes_used + len(val))
