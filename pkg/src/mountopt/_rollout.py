"""Whole-episode rollout of the reference controller in one compiled loop.

Mirrors ``run_episode`` with ``BoundController`` tick for tick; the Python
loop stays the reference and the two are tested against each other.
Obstacle removals are handled as stages: stage k is the map after the
first k events, with its rectangles and occupied-cell centres packed into
flat arrays indexed by offsets.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._kernels import footprint_hits, local_box_hits, nearest_obstacle, path_pose, sphere_hits
from .kinematics import _fk_jac_kernel
from .sim import _arm_tick, _to_base

# failure codes returned by the kernel; 0 is success
FAILURES = (None, "Collision", "JointLimit", "TrackingExceeded", "Horizon")


@njit(cache=True)
def _integrate(x, y, yaw, vx, vy, wz, dt, diff):
    if diff:
        vy = 0.0
    th = wz * dt
    if abs(th) < 1e-12:
        dx, dy = vx * dt, vy * dt
    else:
        s, v = math.sin(th), 2.0 * math.sin(0.5 * th) ** 2
        dx = (vx * s - vy * v) / wz
        dy = (vx * v + vy * s) / wz
    cy, sy = math.cos(yaw), math.sin(yaw)
    return x + cy * dx - sy * dy, y + sy * dx + cy * dy, yaw + th


@njit(cache=True)
def _clip(v, bound):
    return min(max(v, -bound), bound)


@njit(cache=True)
def _segment_speed(speeds, cum, s):
    n = cum.shape[0] - 1
    if n == 0:
        return speeds[0]
    s = min(max(s, 0.0), cum[n])
    i = np.searchsorted(cum, s, side="right") - 1
    return speeds[min(max(i, 0), n - 1)]


@njit(cache=True)
def episode_kernel(origins, kinds, axes, qidx, active, lower, upper, max_delta, torso_idx,
                   inverses, lows, highs, ee_radius, tol_p, tol_r, damping,
                   lo, hi, rects, rect_off, points, point_off, event_s,
                   positions, rotations, dp, w, cum, speeds,
                   gains, q_home, arm, nominal, heading, z_home, torso_home, torso_speed,
                   hx, hy, diff, consts, rot_length,
                   base0, q0, horizon, dt, control_dt):
    """Returns (code, failure step, steps, progress, max te, max re, sum te)."""
    base_gain, _, torso_gain, speed_scale, repulsion, lookahead = (
        gains[0], gains[1], gains[2], gains[3], gains[4], gains[5])
    k_res, max_speed, max_yaw, reach, tangential, clearance, comfort, diff_ahead = (
        consts[0], consts[1], consts[2], consts[3], consts[4], consts[5], consts[6], consts[7])
    ndof = q0.shape[0]
    length = cum[cum.shape[0] - 1]
    offset = cum[1] if cum.shape[0] > 1 else 0.0
    x, y, yaw = base0[0], base0[1], base0[2]
    q = q0.copy()
    s = 0.0
    residual = 0.0
    steps = 0
    max_te = 0.0
    max_re = 0.0
    sum_te = 0.0
    stage = 0
    for _ in range(horizon):
        while stage < event_s.shape[0] and s >= offset + event_s[stage]:
            stage += 1
        R = rects[rect_off[stage]:rect_off[stage + 1]]
        P = points[point_off[stage]:point_off[stage + 1]]

        # controller
        goal = path_pose(positions, rotations, dp, w, cum, s + lookahead)
        c, sn = math.cos(yaw), math.sin(yaw)
        gx, gy = goal[0, 3] - x, goal[1, 3] - y
        _, J = _fk_jac_kernel(origins, kinds, axes, qidx, q, ndof)
        d = np.zeros(6)
        for r in range(6):
            acc = 0.0
            for i in range(ndof):
                if arm[i]:
                    acc += J[r, i] * (q_home[i] - q[i])
            d[r] = acc
        ox = nominal[0] * base_gain + comfort * d[0]
        oy = nominal[1] * base_gain + comfort * d[1]
        vx = base_gain * gx - (c * ox - sn * oy)
        vy = base_gain * gy - (sn * ox + c * oy)
        if P.shape[0] > 0:
            dist_o, nx, ny = nearest_obstacle(x, y, yaw, hx, hy, P, reach)
            if math.isfinite(dist_o):
                closeness = min(1.0, (reach - dist_o) / (reach - clearance))
                into = vx * nx + vy * ny
                if into > 0:
                    side = 1.0 if -vx * ny + vy * nx >= 0 else -1.0
                    slide = closeness * tangential * into * side
                    vx += -closeness * into * nx - slide * ny
                    vy += -closeness * into * ny + slide * nx
                push = repulsion * closeness
                vx, vy = vx - push * nx, vy - push * ny
        speed = math.hypot(vx, vy)
        if speed > max_speed:
            vx, vy = vx * max_speed / speed, vy * max_speed / speed
        dist = math.hypot(gx, gy)
        turn = 0.0
        if dist > 1e-9:
            a = math.atan2(gy, gx) - heading - yaw
            turn = (a + math.pi) % (2 * math.pi) - math.pi
            turn *= min(1.0, dist / max(gains[1], 1e-3))
        wz = _clip(base_gain * turn - comfort * d[5], max_yaw)
        if diff:
            t0, t1, t2 = c * vx + sn * vy, 0.0, _clip((-sn * vx + c * vy) / diff_ahead, max_yaw)
        else:
            t0, t1, t2 = c * vx + sn * vy, -sn * vx + c * vy, wz
        # drop rotation, then translation, if the next base pose would collide
        u0, u1, u2 = 0.0, 0.0, 0.0
        for k in range(3):
            a0, a1, a2 = (t0, t1, t2) if k == 0 else ((t0, t1, 0.0) if k == 1 else (0.0, 0.0, t2))
            n0, n1, n2 = _integrate(x, y, yaw, a0, a1, a2, control_dt, diff)
            if not footprint_hits(n0, n1, n2, hx, hy, R, lo, hi):
                u0, u1, u2 = a0, a1, a2
                break
        torso = 0.0
        if torso_idx.shape[0] > 0:
            z_nom = z_home + (q[torso_idx[0]] - torso_home)
            torso = _clip(torso_gain * (goal[2, 3] - z_nom) - comfort * d[2], torso_speed)
        ee_speed = 0.0
        if s < length:
            ee_speed = (_segment_speed(speeds, cum, s) * speed_scale
                        * max(0.0, 1.0 - k_res * residual))

        # simulator
        s_next = min(length, s + max(ee_speed, 0.0) * dt)
        target = path_pose(positions, rotations, dp, w, cum, s_next)
        bx, by, byaw = _integrate(x, y, yaw, u0, u1, u2, dt, diff)
        q1 = q.copy()
        for i in torso_idx:
            q1[i] = min(max(q1[i] + torso * dt, lower[i]), upper[i])
        local = _to_base((bx, by, byaw), target)
        q1, T, e, at_limit = _arm_tick(origins, kinds, axes, qidx, q1, local, active, damping,
                                       max_delta, lower, upper)
        step = steps + 1
        if footprint_hits(bx, by, byaw, hx, hy, R, lo, hi):
            return 1, step, steps, s, max_te, max_re, sum_te
        p = np.empty(3)
        p[0], p[1], p[2] = T[0, 3], T[1, 3], T[2, 3]
        if p[2] < ee_radius or local_box_hits(p, ee_radius, inverses, lows, highs):
            return 1, step, steps, s, max_te, max_re, sum_te
        if R.shape[0] > 0:
            cb, sb = math.cos(byaw), math.sin(byaw)
            world = np.empty(3)
            world[0] = bx + cb * p[0] - sb * p[1]
            world[1] = by + sb * p[0] + cb * p[1]
            world[2] = p[2]
            if sphere_hits(world, ee_radius, R):
                return 1, step, steps, s, max_te, max_re, sum_te
        ep = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
        er = math.sqrt(e[3] ** 2 + e[4] ** 2 + e[5] ** 2)
        if ep > tol_p or er > tol_r:
            return (2 if at_limit else 3), step, steps, s, max_te, max_re, sum_te
        x, y, yaw, q = bx, by, byaw, q1
        steps = step
        max_te = max(max_te, ep)
        max_re = max(max_re, er)
        sum_te += ep
        s = s_next
        residual = ep + rot_length * er
        if s >= length:
            return 0, steps, steps, s, max_te, max_re, sum_te
    return 4, steps, steps, s, max_te, max_re, sum_te


def pack_stages(occupancy, events) -> tuple:
    """Flat (rects, rect offsets, points, point offsets, event progress) for the kernel."""
    events = sorted(events, key=lambda ev: ev.at)
    stages = [occupancy]
    for ev in events:
        stages.append(stages[-1].without(ev.obstacle))
    rects = [st.rect_array for st in stages]
    points = [st.occupied_centers() for st in stages]
    offsets = lambda arrs: np.concatenate([[0], np.cumsum([len(a) for a in arrs])])  # noqa: E731
    return (np.ascontiguousarray(np.vstack(rects)), offsets(rects),
            np.ascontiguousarray(np.vstack(points).reshape(-1, 2)), offsets(points),
            np.array([ev.at for ev in events], dtype=float))
