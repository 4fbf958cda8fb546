"""Compiled inner loops shared by the map, the simulated lidar and the planner.

All coordinates handed to these kernels are already expressed in voxel
units relative to the grid origin, so a voxel index is ``floor(coord)``.
"""

from __future__ import annotations

import heapq
import math

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True)
def _floor_idx(v):
    return int(math.floor(v))


@njit(cache=True)
def traverse_count(ax, ay, az, bx, by, bz):
    return (
        abs(_floor_idx(bx) - _floor_idx(ax))
        + abs(_floor_idx(by) - _floor_idx(ay))
        + abs(_floor_idx(bz) - _floor_idx(az))
        + 1
    )


@njit(cache=True)
def traverse_into(ax, ay, az, bx, by, bz, out):
    """Write the voxel sequence of segment a->b into ``out``; return its length.

    Performs exactly |di|+|dj|+|dk| unit steps, so the walk always ends in
    the voxel holding ``b`` even when rounding puts two crossings at the
    same parameter. Ties step the lower axis first.
    """
    a = (ax, ay, az)
    b = (bx, by, bz)
    cur = np.empty(3, np.int64)
    step = np.zeros(3, np.int64)
    remaining = np.zeros(3, np.int64)
    tmax = np.full(3, INF)
    tdelta = np.full(3, INF)
    for i in range(3):
        cur[i] = _floor_idx(a[i])
        end = _floor_idx(b[i])
        d = b[i] - a[i]
        remaining[i] = abs(end - cur[i])
        if d > 0.0:
            step[i] = 1
            tmax[i] = (cur[i] + 1.0 - a[i]) / d
            tdelta[i] = 1.0 / d
        elif d < 0.0:
            step[i] = -1
            tmax[i] = (a[i] - cur[i]) / (-d)
            tdelta[i] = -1.0 / d
    n = remaining[0] + remaining[1] + remaining[2]
    out[0, 0] = cur[0]
    out[0, 1] = cur[1]
    out[0, 2] = cur[2]
    for s in range(n):
        best = -1
        for i in range(3):
            if remaining[i] > 0 and (best < 0 or tmax[i] < tmax[best]):
                best = i
        cur[best] += step[best]
        tmax[best] += tdelta[best]
        remaining[best] -= 1
        out[s + 1, 0] = cur[0]
        out[s + 1, 1] = cur[1]
        out[s + 1, 2] = cur[2]
    return n + 1


@njit(cache=True)
def _update(prev, meas, prior, lo, hi):
    odds = ((1.0 - meas) / meas) * ((1.0 - prev) / prev) * (prior / (1.0 - prior))
    p = 1.0 / (1.0 + odds)
    if p < lo:
        return lo
    if p > hi:
        return hi
    return p


@njit(cache=True)
def _state(p, prior):
    # 0 unknown, 1 free, 2 occupied
    if p == 0.0:
        return 0
    if p < prior:
        return 1
    if p > prior:
        return 2
    return 0


@njit(cache=True)
def integrate_rays(prob, mark, sensor, ends, hits, prior, p_hit, p_miss, lo, hi):
    """Apply one scan to ``prob`` in place.

    ``sensor`` and ``ends`` are in grid-index units (already offset).
    Returns (touched, changed) as (n, 3) index arrays in first-touch order.
    ``mark`` must be all zero on entry and is left all zero on exit.
    """
    nrays = ends.shape[0]
    cap = 64
    buf = np.empty((cap, 3), np.int64)
    touched = np.empty((1024, 3), np.int64)
    nt = 0
    for r in range(nrays):
        ex = ends[r, 0]
        ey = ends[r, 1]
        ez = ends[r, 2]
        m = traverse_count(sensor[0], sensor[1], sensor[2], ex, ey, ez)
        if m > cap:
            cap = 2 * m
            buf = np.empty((cap, 3), np.int64)
        m = traverse_into(sensor[0], sensor[1], sensor[2], ex, ey, ez, buf)
        for j in range(m):
            i0 = buf[j, 0]
            i1 = buf[j, 1]
            i2 = buf[j, 2]
            want = 1
            if j == m - 1 and hits[r]:
                want = 2
            old = mark[i0, i1, i2]
            if old == 0:
                if nt == touched.shape[0]:
                    grown = np.empty((2 * nt, 3), np.int64)
                    grown[:nt] = touched[:nt]
                    touched = grown
                touched[nt, 0] = i0
                touched[nt, 1] = i1
                touched[nt, 2] = i2
                nt += 1
            if want > old:
                mark[i0, i1, i2] = want
    changed = np.empty((nt, 3), np.int64)
    nc = 0
    for t in range(nt):
        i0 = touched[t, 0]
        i1 = touched[t, 1]
        i2 = touched[t, 2]
        meas = p_hit if mark[i0, i1, i2] == 2 else p_miss
        mark[i0, i1, i2] = 0
        old_p = prob[i0, i1, i2]
        before = _state(old_p, prior)
        if old_p == 0.0:
            old_p = prior
        new_p = _update(old_p, meas, prior, lo, hi)
        prob[i0, i1, i2] = new_p
        if _state(new_p, prior) != before:
            changed[nc, 0] = i0
            changed[nc, 1] = i1
            changed[nc, 2] = i2
            nc += 1
    return touched[:nt].copy(), changed[:nc].copy()


@njit(cache=True)
def march_rays(occ, origin, dirs, max_range):
    """Cast unit-direction rays through a boolean grid; cells outside count as occupied.

    ``origin`` is in grid units and ``max_range`` too. Returns (t, hit) where
    ``t`` is the entry distance into the first occupied cell, or ``max_range``.
    """
    n = dirs.shape[0]
    nx, ny, nz = occ.shape
    out_t = np.empty(n, np.float64)
    out_hit = np.zeros(n, np.bool_)
    cur = np.empty(3, np.int64)
    step = np.zeros(3, np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    dims = (nx, ny, nz)
    for r in range(n):
        for i in range(3):
            cur[i] = _floor_idx(origin[i])
            d = dirs[r, i]
            if d > 0.0:
                step[i] = 1
                tmax[i] = (cur[i] + 1.0 - origin[i]) / d
                tdelta[i] = 1.0 / d
            elif d < 0.0:
                step[i] = -1
                tmax[i] = (origin[i] - cur[i]) / (-d)
                tdelta[i] = -1.0 / d
            else:
                step[i] = 0
                tmax[i] = INF
                tdelta[i] = INF
        t = 0.0
        while True:
            inside = True
            for i in range(3):
                if cur[i] < 0 or cur[i] >= dims[i]:
                    inside = False
            if not inside or occ[cur[0], cur[1], cur[2]]:
                out_t[r] = t
                out_hit[r] = True
                break
            best = 0
            if tmax[1] < tmax[best]:
                best = 1
            if tmax[2] < tmax[best]:
                best = 2
            t = tmax[best]
            if t > max_range:
                out_t[r] = max_range
                break
            cur[best] += step[best]
            tmax[best] += tdelta[best]
    return out_t, out_hit


@njit(cache=True)
def astar(trav, start, goal, vres, goal_ok):
    """Optimal 26-connected A* on a boolean traversability grid.

    Heap entries are (f, flat index); flat C-order index equals the
    lexicographic key order, so equal-f ties resolve by key.
    ``goal_ok`` lets the goal cell be entered even if not traversable.
    Returns (parent flat array, g at goal) with g = inf when unreachable.
    """
    nx, ny, nz = trav.shape
    total = nx * ny * nz
    g = np.full(total, INF)
    parent = np.full(total, -1, np.int64)
    closed = np.zeros(total, np.bool_)
    s = (start[0] * ny + start[1]) * nz + start[2]
    t = (goal[0] * ny + goal[1]) * nz + goal[2]
    r2 = math.sqrt(2.0)
    r3 = math.sqrt(3.0)
    g[s] = 0.0
    heap = [(_octile(start[0] - goal[0], start[1] - goal[1], start[2] - goal[2], r2, r3) * vres, s)]
    while len(heap) > 0:
        f, u = heapq.heappop(heap)
        if closed[u]:
            continue
        closed[u] = True
        if u == t:
            break
        ux = u // (ny * nz)
        uy = (u // nz) % ny
        uz = u % nz
        gu = g[u]
        for dx in range(-1, 2):
            vx = ux + dx
            if vx < 0 or vx >= nx:
                continue
            for dy in range(-1, 2):
                vy = uy + dy
                if vy < 0 or vy >= ny:
                    continue
                for dz in range(-1, 2):
                    if dx == 0 and dy == 0 and dz == 0:
                        continue
                    vz = uz + dz
                    if vz < 0 or vz >= nz:
                        continue
                    v = (vx * ny + vy) * nz + vz
                    if closed[v]:
                        continue
                    if not trav[vx, vy, vz] and not (goal_ok and v == t):
                        continue
                    k = abs(dx) + abs(dy) + abs(dz)
                    if k == 1:
                        c = vres
                    elif k == 2:
                        c = r2 * vres
                    else:
                        c = r3 * vres
                    ng = gu + c
                    if ng < g[v]:
                        g[v] = ng
                        parent[v] = u
                        h = _octile(vx - goal[0], vy - goal[1], vz - goal[2], r2, r3) * vres
                        heapq.heappush(heap, (ng + h, v))
    return parent, g[t]


@njit(cache=True)
def _octile(dx, dy, dz, r2, r3):
    a = abs(dx)
    b = abs(dy)
    c = abs(dz)
    # sort descending
    if a < b:
        a, b = b, a
    if b < c:
        b, c = c, b
    if a < b:
        a, b = b, a
    return r3 * c + r2 * (b - c) + (a - b)
