"""Risk-aware shortest paths on the voxel map.

A voxel is traversable when it is Free and no Occupied voxel lies within
Chebyshev distance ``margin``. Unknown space is never entered except for
the goal voxel itself, which may sit on the unknown boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from rapidex import _kernels
from rapidex.voxel_map import OccupancyMap, UpdateDigest, VoxelKey

log = logging.getLogger(__name__)


class StartNotTraversable(ValueError):
    """The start voxel is not safe; distinct from an unreachable goal."""


@dataclass(frozen=True)
class PlanRequest:
    start: tuple
    goal: VoxelKey
    margin: int = 2
    connectivity: int = 26


@dataclass
class Path:
    waypoints: np.ndarray  # (n, 3) voxel centers
    keys: list
    cost: float

    def __len__(self) -> int:
        return len(self.keys)

    def dumps(self) -> str:
        lines = [f"path v1 {len(self.waypoints)}"]
        lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.waypoints.tolist()]
        return "\n".join(lines) + "\n"


def traversable_block(
    prob: np.ndarray, prior: float, margin: int, avoid_unknown: bool = False
) -> np.ndarray:
    """Traversability of a dense probability block.

    With ``avoid_unknown`` a voxel also needs its whole margin neighbourhood
    to be known, which keeps the vehicle away from unobserved rock.
    """
    free = (prob != 0.0) & (prob < prior)
    if margin <= 0:
        return free
    size = 2 * margin + 1
    blocked = prob > prior
    if avoid_unknown:
        blocked = blocked | (prob == 0.0) | (prob == prior)
    near = ndimage.maximum_filter(blocked, size=size, mode="constant", cval=avoid_unknown)
    return free & ~near


def is_traversable(omap: OccupancyMap, key: Sequence[int], margin: int) -> bool:
    key = np.asarray(key, np.int64)
    block = omap.window(key - margin, key + margin)
    return bool(traversable_block(block, omap.prior, margin)[margin, margin, margin])


def _step_len(a, b) -> float:
    return math.sqrt(sum((int(x) - int(y)) ** 2 for x, y in zip(a, b)))


def plan(
    omap: OccupancyMap,
    req: PlanRequest,
    allow_unsafe_start: bool = False,
    avoid_unknown: bool = False,
) -> Optional[Path]:
    """Minimum-length path from ``req.start`` to ``req.goal``, or None if unreachable.

    ``allow_unsafe_start`` lets a vehicle that drifted into the margin zone
    plan its way back out; the start voxel must still not be Occupied.

    ``avoid_unknown`` first searches a stricter graph whose voxels have no
    Unknown voxel within the margin, except near the start and goal. It
    falls back to the plain graph when the strict one has no path.
    """
    if req.connectivity != 26:
        raise NotImplementedError("only 26-connected planning is supported")
    start = np.asarray(omap.key_of(req.start), np.int64)
    goal = np.asarray(req.goal, np.int64)
    if not omap.grid.size:
        raise StartNotTraversable("empty map")
    m = req.margin
    lo = np.minimum(start, goal) - 1
    hi = np.maximum(start, goal) + 1
    # search box: the known map plus the goal
    lo = np.minimum(lo, omap.grid_lo)
    hi = np.maximum(hi, omap.grid_lo + np.array(omap.grid.shape) - 1)
    block = omap.window(lo - m, hi + m)
    trav = traversable_block(block, omap.prior, m)
    sl = tuple(slice(m, m + int(hi[i] - lo[i] + 1)) for i in range(3))
    trav = np.ascontiguousarray(trav[sl])
    s_idx = start - lo
    g_idx = goal - lo
    s_t = tuple(s_idx)
    if not trav[s_t]:
        if not allow_unsafe_start or block[tuple(s_idx + m)] > omap.prior:
            raise StartNotTraversable(f"start voxel {tuple(start.tolist())} is not traversable")
        trav[s_t] = True
    if np.array_equal(start, goal):
        key = tuple(int(c) for c in start)
        return Path(omap.centers_of(np.array([key])), [key], 0.0)
    if block[tuple(g_idx + m)] > omap.prior:
        return None
    parent = g = None
    if avoid_unknown and m > 0:
        strict = np.ascontiguousarray(traversable_block(block, omap.prior, m, True)[sl])
        # the neighbourhoods of start and goal touch unknown space by construction
        for c in (s_idx, g_idx):
            box = tuple(slice(max(int(c[i]) - m - 1, 0), int(c[i]) + m + 2) for i in range(3))
            strict[box] = trav[box]
        parent, g = _kernels.astar(strict, s_idx, g_idx, omap.v_res, True)
    if g is None or not np.isfinite(g):
        parent, g = _kernels.astar(trav, s_idx, g_idx, omap.v_res, True)
    if not np.isfinite(g):
        return None
    shape = trav.shape
    flat = int(np.ravel_multi_index(tuple(g_idx), shape))
    s_flat = int(np.ravel_multi_index(tuple(s_idx), shape))
    chain = [flat]
    while chain[-1] != s_flat:
        chain.append(int(parent[chain[-1]]))
    chain.reverse()
    idx = np.array(np.unravel_index(chain, shape)).T
    keys_arr = idx + lo
    keys = [tuple(k) for k in keys_arr.tolist()]
    cost = sum(_step_len(a, b) for a, b in zip(keys, keys[1:])) * omap.v_res
    return Path(omap.centers_of(keys_arr), keys, cost)


def compute_homing_path(
    omap: OccupancyMap, position: Sequence[float], home: Sequence[float], margin: int = 2,
    allow_unsafe_start: bool = True, avoid_unknown: bool = False,
) -> Optional[Path]:
    req = PlanRequest(tuple(position), omap.key_of(home), margin)
    path = plan(omap, req, allow_unsafe_start=allow_unsafe_start, avoid_unknown=avoid_unknown)
    if path is None:
        log.warning("home %s unreachable from %s", tuple(home), tuple(position))
    return path


def replan_needed(
    omap: OccupancyMap, remaining: Sequence[VoxelKey], digest: UpdateDigest, margin: int
) -> bool:
    """True if a changed voxel lies within ``margin`` of a remaining waypoint or
    a remaining waypoint stopped being traversable.
    """
    if len(digest.changed) == 0 or not remaining:
        return False
    wp = np.asarray(remaining, np.int64)
    ch = np.asarray(digest.changed, np.int64)
    reach = max(margin, 0)
    lo = wp.min(axis=0) - reach
    hi = wp.max(axis=0) + reach
    inside = np.all((ch >= lo) & (ch <= hi), axis=1)
    ch = ch[inside]
    if len(ch) == 0:
        return False
    for key in wp:
        if np.any(np.max(np.abs(ch - key), axis=1) <= reach):
            return True
    # the goal may legitimately be non-Free; only interior waypoints must stay traversable
    block = omap.window(lo - margin, hi + margin)
    trav = traversable_block(block, omap.prior, margin)
    for key in wp[:-1]:
        if not trav[tuple(key - lo + margin)]:
            return True
    return False
