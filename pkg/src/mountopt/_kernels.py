"""Compiled per-tick geometry used by the simulator and the controller."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def footprint_hits(x, y, yaw, hx, hy, rects, lo, hi):
    """Oriented footprint vs map bounds and axis-aligned rects (rows xmin, ymin, xmax, ymax, ...).

    Leaving the map counts as a hit; merely touching a rect does not.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    ac, as_ = abs(c), abs(s)
    ex = hx * ac + hy * as_
    ey = hx * as_ + hy * ac
    if x - ex < lo[0] or x + ex > hi[0] or y - ey < lo[1] or y + ey > hi[1]:
        return True
    for k in range(rects.shape[0]):
        cx = 0.5 * (rects[k, 0] + rects[k, 2])
        cy = 0.5 * (rects[k, 1] + rects[k, 3])
        rx = 0.5 * (rects[k, 2] - rects[k, 0])
        ry = 0.5 * (rects[k, 3] - rects[k, 1])
        dx, dy = x - cx, y - cy
        if abs(dx) >= rx + ex or abs(dy) >= ry + ey:
            continue
        if abs(dx * c + dy * s) >= hx + rx * ac + ry * as_:
            continue
        if abs(-dx * s + dy * c) >= hy + rx * as_ + ry * ac:
            continue
        return True
    return False


@njit(cache=True)
def _box_distance(px, py, pz, lx, ly, lz, ux, uy, uz):
    dx = max(lx - px, 0.0, px - ux)
    dy = max(ly - py, 0.0, py - uy)
    dz = max(lz - pz, 0.0, pz - uz)
    return math.sqrt(dx * dx + dy * dy + dz * dz)


@njit(cache=True)
def sphere_hits(p, radius, rects):
    """Sphere vs boxes spanning z in [0, height] (rows xmin, ymin, xmax, ymax, height)."""
    for k in range(rects.shape[0]):
        if _box_distance(p[0], p[1], p[2], rects[k, 0], rects[k, 1], 0.0,
                         rects[k, 2], rects[k, 3], rects[k, 4]) < radius:
            return True
    return False


@njit(cache=True)
def local_box_hits(p, radius, inverses, lows, highs):
    """Sphere vs boxes given by the inverse of their frame and local corners."""
    for k in range(inverses.shape[0]):
        T = inverses[k]
        qx = T[0, 0] * p[0] + T[0, 1] * p[1] + T[0, 2] * p[2] + T[0, 3]
        qy = T[1, 0] * p[0] + T[1, 1] * p[1] + T[1, 2] * p[2] + T[1, 3]
        qz = T[2, 0] * p[0] + T[2, 1] * p[1] + T[2, 2] * p[2] + T[2, 3]
        if _box_distance(qx, qy, qz, lows[k, 0], lows[k, 1], lows[k, 2],
                         highs[k, 0], highs[k, 1], highs[k, 2]) < radius:
            return True
    return False


@njit(cache=True)
def nearest_obstacle(x, y, yaw, hx, hy, points, reach):
    """Distance from the footprint to the closest point within ``reach`` and the
    world-frame unit vector towards it; (inf, 0, 0) if there is none."""
    c, s = math.cos(yaw), math.sin(yaw)
    bound = reach + hx + hy
    best, bx, by = math.inf, 0.0, 0.0
    for k in range(points.shape[0]):
        dx, dy = points[k, 0] - x, points[k, 1] - y
        if abs(dx) > bound or abs(dy) > bound:
            continue
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        gx = lx - min(max(lx, -hx), hx)
        gy = ly - min(max(ly, -hy), hy)
        d = math.sqrt(gx * gx + gy * gy)
        if d >= reach or d >= best:
            continue
        if d == 0.0:
            # inside the footprint: direction from the centre
            gx, gy = lx, ly
        n = math.sqrt(gx * gx + gy * gy) + 1e-12
        best, bx, by = d, gx / n, gy / n
    return best, c * bx - s * by, s * bx + c * by


@njit(cache=True)
def _rotation_exp(wx, wy, wz):
    R = np.eye(3)
    th = math.sqrt(wx * wx + wy * wy + wz * wz)
    if th < 1e-12:
        return R
    kx, ky, kz = wx / th, wy / th, wz / th
    a, b = math.sin(th), 1.0 - math.cos(th)
    R[0, 0] = 1.0 - b * (ky * ky + kz * kz)
    R[1, 1] = 1.0 - b * (kx * kx + kz * kz)
    R[2, 2] = 1.0 - b * (kx * kx + ky * ky)
    R[0, 1] = -a * kz + b * kx * ky
    R[1, 0] = a * kz + b * kx * ky
    R[0, 2] = a * ky + b * kx * kz
    R[2, 0] = -a * ky + b * kx * kz
    R[1, 2] = -a * kx + b * ky * kz
    R[2, 1] = a * kx + b * ky * kz
    return R


@njit(cache=True)
def path_pose(positions, rotations, dp, w, cum, s):
    """Pose at arc length ``s`` along a piecewise linear / geodesic path."""
    T = np.eye(4)
    n = cum.shape[0] - 1
    if n == 0:
        T[:3, :3] = rotations[0]
        T[:3, 3] = positions[0]
        return T
    s = min(max(s, 0.0), cum[n])
    i = np.searchsorted(cum, s, side="right") - 1
    i = min(max(i, 0), n - 1)
    seg = cum[i + 1] - cum[i]
    t = (s - cum[i]) / seg if seg > 0 else 1.0
    t = min(max(t, 0.0), 1.0)
    T[:3, :3] = rotations[i] @ _rotation_exp(t * w[i, 0], t * w[i, 1], t * w[i, 2])
    for k in range(3):
        T[k, 3] = positions[i, k] + t * dp[i, k]
    return T
