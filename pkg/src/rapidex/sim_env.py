"""Ground-truth worlds, simulated 3D lidar and a kinematic path follower."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from rapidex import _kernels
from rapidex.frontier_select import MavState, wrap_angle
from rapidex.voxel_map import SensorScan

WORLD_KINDS = ("corridor", "branching_cave", "loop")


class WorldError(ValueError):
    pass


class WorldFormatError(WorldError):
    pass


@dataclass
class WorldModel:
    """Voxelized ground truth. Anything outside ``bounds`` counts as occupied."""

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    v_res: float
    occ: np.ndarray  # bool grid, index (0,0,0) has its corner at bounds_min
    start: Optional[np.ndarray] = None

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, float)
        self.bounds_max = np.asarray(self.bounds_max, float)
        if np.any(self.bounds_max <= self.bounds_min):
            raise WorldError("degenerate bounds")
        self.occ = np.asarray(self.occ, bool)
        self.occ.flags.writeable = False
        if self.start is None:
            self.start = self.deepest_free_point()
        self.start = np.asarray(self.start, float)

    @property
    def shape(self) -> tuple:
        return self.occ.shape

    def key_of(self, p: Sequence[float]) -> tuple:
        return tuple(int(math.floor((p[i] - self.bounds_min[i]) / self.v_res)) for i in range(3))

    def center_of(self, key) -> np.ndarray:
        return self.bounds_min + (np.asarray(key, float) + 0.5) * self.v_res

    def is_occupied(self, p: Sequence[float]) -> bool:
        k = self.key_of(p)
        if any(c < 0 or c >= n for c, n in zip(k, self.occ.shape)):
            return True
        return bool(self.occ[k])

    def occupied_keys(self) -> np.ndarray:
        return np.argwhere(self.occ)

    def free_count(self) -> int:
        return int(self.occ.size - np.count_nonzero(self.occ))

    def reachable(self, start: Optional[Sequence[float]] = None) -> np.ndarray:
        """Boolean grid of free voxels 26-connected to ``start``."""
        start = self.start if start is None else start
        k = self.key_of(start)
        if self.is_occupied(start):
            raise WorldError("start lies in occupied space")
        labels, _ = ndimage.label(~self.occ, structure=np.ones((3, 3, 3), bool))
        return labels == labels[k]

    def chebyshev_clearance(self, p: Sequence[float], limit: float) -> float:
        """Chebyshev distance from ``p`` to the nearest occupied voxel center, capped at ``limit``.

        The region outside the bounds counts as occupied; its distance is
        measured to the bounding faces.
        """
        p = np.asarray(p, float)
        best = float(np.min(np.concatenate([p - self.bounds_min, self.bounds_max - p])))
        best = max(best, 0.0)
        lo = np.floor((p - limit - self.bounds_min) / self.v_res - 0.5).astype(int)
        hi = np.ceil((p + limit - self.bounds_min) / self.v_res - 0.5).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, np.array(self.occ.shape) - 1)
        if np.all(lo <= hi):
            sub = self.occ[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
            idx = np.argwhere(sub) + lo
            if len(idx):
                centers = self.bounds_min + (idx + 0.5) * self.v_res
                best = min(best, float(np.min(np.max(np.abs(centers - p), axis=1))))
        return min(best, limit)

    def deepest_free_point(self) -> np.ndarray:
        """Center of the free voxel farthest from any obstacle (ties: smallest key)."""
        padded = np.pad(~self.occ, 1, constant_values=False)
        dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1, 1:-1]
        if not np.any(dist > 0):
            raise WorldError("world has no free space")
        k = np.unravel_index(int(np.argmax(dist)), dist.shape)
        return self.center_of(k)

    # -- text format -------------------------------------------------------------

    def dumps(self) -> str:
        b0, b1 = self.bounds_min, self.bounds_max
        head = "voxworld v1 {} {} {} {} {} {} {}".format(
            repr(float(self.v_res)), *(repr(float(v)) for v in (*b0, *b1))
        )
        keys = np.argwhere(self.occ)
        body = "\n".join(f"{a} {b} {c}" for a, b, c in keys.tolist())
        return head + "\n" + body + ("\n" if len(keys) else "")

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, start=None) -> "WorldModel":
        lines = text.splitlines()
        if not lines:
            raise WorldFormatError("empty world file")
        head = lines[0].split()
        if len(head) != 9 or head[:2] != ["voxworld", "v1"]:
            raise WorldFormatError(f"bad header: {lines[0]!r}")
        res = float(head[2])
        b0 = np.array([float(v) for v in head[3:6]])
        b1 = np.array([float(v) for v in head[6:9]])
        shape = tuple(int(round((b1[i] - b0[i]) / res)) for i in range(3))
        occ = np.zeros(shape, bool)
        body = [ln for ln in lines[1:] if ln.strip()]
        if body:
            keys = np.array([ln.split() for ln in body], dtype=np.int64)
            if keys.shape[1] != 3 or np.any(keys < 0) or np.any(keys >= shape):
                raise WorldFormatError("occupied key outside bounds")
            occ[tuple(keys.T)] = True
        return cls(b0, b1, res, occ, start)

    @classmethod
    def load(cls, path, start=None) -> "WorldModel":
        with open(path) as fh:
            return cls.loads(fh.read(), start)


# -- generation ---------------------------------------------------------------

DEFAULT_PARAMS = {
    "corridor": {"length": 30.0, "radius": 2.5, "wall": 1.0, "res": 0.25},
    "loop": {"size_x": 24.0, "size_y": 16.0, "radius": 2.0, "wall": 1.0, "res": 0.25},
    "branching_cave": {
        "size_x": 40.0,
        "size_y": 40.0,
        "size_z": 10.0,
        "branches": 3,
        "radius_min": 2.0,
        "radius_max": 3.0,
        "segment_length": 6.0,
        "segments": 4,
        "res": 0.25,
    },
}


def _carve_capsule(free, res, b0, p, q, rp, rq):
    """Mark voxel centers within the radius-interpolated capsule p->q."""
    rmax = max(rp, rq)
    lo = np.floor((np.minimum(p, q) - rmax - b0) / res).astype(int)
    hi = np.floor((np.maximum(p, q) + rmax - b0) / res).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(free.shape) - 1)
    if np.any(lo > hi):
        return
    axes = [b0[i] + (np.arange(lo[i], hi[i] + 1) + 0.5) * res for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    d = q - p
    L2 = float(d @ d)
    if L2 == 0:
        t = np.zeros(X.shape)
    else:
        t = np.clip(((pts - p) @ d) / L2, 0.0, 1.0)
    near = p + t[..., None] * d
    dist = np.linalg.norm(pts - near, axis=-1)
    rad = rp + (rq - rp) * t
    sub = free[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    sub |= dist <= rad


def _cylinder(free, res, b0, p, q, radius):
    """Flat-capped cylinder between p and q along x."""
    lo = np.floor((np.minimum(p, q) - radius - b0) / res).astype(int)
    hi = np.floor((np.maximum(p, q) + radius - b0) / res).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(free.shape) - 1)
    axes = [b0[i] + (np.arange(lo[i], hi[i] + 1) + 0.5) * res for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    inside = (X >= p[0]) & (X <= q[0]) & (np.hypot(Y - p[1], Z - p[2]) <= radius)
    free[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] |= inside


def _grid(b0, b1, res):
    shape = tuple(int(round((b1[i] - b0[i]) / res)) for i in range(3))
    return np.zeros(shape, bool)


def generate_world(kind: str, seed: int = 0, params: Optional[dict] = None) -> WorldModel:
    """Deterministic procedural world of the given kind."""
    if kind not in WORLD_KINDS:
        raise WorldError(f"unknown world kind {kind!r}; expected one of {WORLD_KINDS}")
    p = dict(DEFAULT_PARAMS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise WorldError(f"unknown parameters for {kind}: {sorted(unknown)}")
    p.update(params or {})
    res = float(p["res"])
    if res <= 0:
        raise WorldError("res must be positive")
    rng = np.random.default_rng(seed)

    if kind == "corridor":
        L, rad, wall = p["length"], p["radius"], p["wall"]
        _check_radius(rad, res)
        if L <= 0:
            raise WorldError("length must be positive")
        b0 = np.zeros(3)
        b1 = np.array([L + 2 * wall, 2 * (rad + wall), 2 * (rad + wall)])
        b1 = np.ceil(b1 / res) * res
        free = _grid(b0, b1, res)
        y0, z0 = b1[1] / 2, b1[2] / 2
        a, b = np.array([wall, y0, z0]), np.array([wall + L, y0, z0])
        _cylinder(free, res, b0, a, b, rad)
        start = np.array([wall + min(rad + 0.5, L / 2), y0, z0])

    elif kind == "loop":
        sx, sy, rad, wall = p["size_x"], p["size_y"], p["radius"], p["wall"]
        _check_radius(rad, res)
        if min(sx, sy) <= 4 * rad:
            raise WorldError("loop too small for its tunnel radius: no cycle")
        pad = rad + wall
        b0 = np.zeros(3)
        b1 = np.ceil(np.array([sx + 2 * pad, sy + 2 * pad, 2 * pad]) / res) * res
        free = _grid(b0, b1, res)
        z0 = b1[2] / 2
        corners = [
            np.array([pad, pad, z0]),
            np.array([pad + sx, pad, z0]),
            np.array([pad + sx, pad + sy, z0]),
            np.array([pad, pad + sy, z0]),
        ]
        for i in range(4):
            _carve_capsule(free, res, b0, corners[i], corners[(i + 1) % 4], rad, rad)
        start = np.array([pad + sx / 2, pad, z0])

    else:
        size = np.array([p["size_x"], p["size_y"], p["size_z"]], float)
        rmin, rmax = p["radius_min"], p["radius_max"]
        _check_radius(rmin, res)
        if rmax < rmin:
            raise WorldError("radius_max < radius_min")
        b0 = np.zeros(3)
        b1 = np.ceil(size / res) * res
        free = _grid(b0, b1, res)
        keep = rmax + 1.0
        lo_lim = b0 + keep
        hi_lim = b1 - keep
        # thin worlds: keep the tunnel axis on the mid plane
        for i in range(3):
            if lo_lim[i] > hi_lim[i]:
                lo_lim[i] = hi_lim[i] = (b0[i] + b1[i]) / 2
        start = np.array([lo_lim[0] + 1.0, (b0[1] + b1[1]) / 2, (b0[2] + b1[2]) / 2])
        start = np.minimum(np.maximum(start, lo_lim), hi_lim)
        nodes = [(start, float(rng.uniform(rmin, rmax)))]
        seg_len = p["segment_length"]
        for b in range(int(p["branches"])):
            base, r0 = nodes[0] if b == 0 else nodes[int(rng.integers(len(nodes)))]
            heading = 0.0 if b == 0 else float(rng.uniform(-math.pi, math.pi))
            cur, rcur = base, r0
            for _ in range(int(p["segments"])):
                heading += float(rng.uniform(-math.pi / 4, math.pi / 4))
                dz = float(rng.uniform(-0.3, 0.3)) * seg_len
                step = np.array([math.cos(heading) * seg_len, math.sin(heading) * seg_len, dz])
                nxt = np.minimum(np.maximum(cur + step, lo_lim), hi_lim)
                if np.linalg.norm(nxt - cur) < 1e-9:
                    heading += math.pi
                    continue
                rnext = float(rng.uniform(rmin, rmax))
                _carve_capsule(free, res, b0, cur, nxt, rcur, rnext)
                nodes.append((nxt, rnext))
                cur, rcur = nxt, rnext
        _carve_capsule(free, res, b0, start, start, nodes[0][1], nodes[0][1])

    if not free.any():
        raise WorldError("generated world has no free space")
    start = _snap_center(start, b0, res)
    return WorldModel(b0, b1, res, ~free, start)


def _snap_center(p, b0, res):
    return b0 + (np.floor((p - b0) / res) + 0.5) * res


def _check_radius(radius, res):
    if radius < 2 * res:
        raise WorldError(f"tunnel radius {radius} below twice the truth resolution {res}")


# -- lidar ----------------------------------------------------------------------


@dataclass(frozen=True)
class LidarSpec:
    R: float = 10.0
    h_rays: int = 360
    v_rays: int = 16
    v_fov: float = math.pi / 6
    rate: float = 10.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.R <= 0 or self.h_rays < 1 or self.v_rays < 1 or self.rate <= 0:
            raise ValueError("invalid lidar spec")

    def directions(self, heading: float) -> np.ndarray:
        az = heading + 2 * math.pi * np.arange(self.h_rays) / self.h_rays
        if self.v_rays == 1:
            el = np.zeros(1)
        else:
            el = np.linspace(-self.v_fov / 2, self.v_fov / 2, self.v_rays)
        A, E = np.meshgrid(az, el, indexing="ij")
        A, E = A.ravel(), E.ravel()
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


def simulate_scan(
    world: WorldModel,
    spec: LidarSpec,
    pose: MavState,
    rng: Optional[np.random.Generator] = None,
    directions: Optional[np.ndarray] = None,
) -> SensorScan:
    """Cast the lidar pattern against ground truth.

    Hit endpoints sit a hair inside the first occupied voxel so they fall in
    that voxel at any map resolution aligned with the truth grid.
    """
    pos = np.asarray(pose.position, float)
    if world.is_occupied(pos):
        raise WorldError(f"pose {pos.tolist()} is inside occupied space")
    dirs = spec.directions(pose.heading) if directions is None else np.asarray(directions, float)
    o = (pos - world.bounds_min) / world.v_res
    t, hit = _kernels.march_rays(world.occ, o, dirs, spec.R / world.v_res)
    dist = t * world.v_res
    nudge = 1e-4 * world.v_res
    dist = np.where(hit, dist + nudge, spec.R)
    if spec.noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        noise = rng.normal(0.0, spec.noise_sigma, len(dist))
        dist = np.where(hit, np.clip(dist + noise, nudge, spec.R), dist)
    hit &= dist <= spec.R + world.v_res
    ends = pos + dirs * dist[:, None]
    return SensorScan(pos.copy(), ends, hit)


# -- follower ------------------------------------------------------------------------

SLOW_FACTOR = 0.2


@dataclass
class KinematicFollower:
    """Idealized vehicle that flies a waypoint polyline.

    Yaw turns toward the current leg at most ``omega_max`` per second.
    Along a leg the speed is ``v_max * max(cos(heading error), 0.2)``, so
    the vehicle mostly yaws first and then moves.
    """

    state: MavState
    tick: float = 0.1
    arrival_tol: float = 0.05
    _path: Optional[np.ndarray] = field(default=None, repr=False)
    _target: int = field(default=0, repr=False)

    def _leg_factor(self, pos, tgt, heading) -> float:
        d = tgt - pos
        if math.hypot(d[0], d[1]) <= 1e-9:
            return 1.0
        err = wrap_angle(math.atan2(d[1], d[0]) - heading)
        return max(math.cos(err), SLOW_FACTOR)

    def follow(self, waypoints: np.ndarray, start_index: int = 0) -> None:
        """Switch to a new polyline, aiming first at ``waypoints[start_index]``."""
        self._path = waypoints
        self._target = min(start_index, len(waypoints) - 1)

    @property
    def target_index(self) -> int:
        return self._target

    def step(self, waypoints: np.ndarray) -> tuple[MavState, bool]:
        if waypoints is not self._path:
            self.follow(waypoints)
        wps = np.asarray(waypoints, float).reshape(-1, 3)
        if len(wps) == 0:
            raise ValueError("empty path")
        s = self.state
        pos = s.position.copy()
        while self._target < len(wps) - 1 and np.linalg.norm(wps[self._target] - pos) < 1e-9:
            self._target += 1
        d = wps[self._target] - pos
        heading = s.heading
        if math.hypot(d[0], d[1]) > 1e-9:
            err = wrap_angle(math.atan2(d[1], d[0]) - heading)
            turn = max(-s.omega_max * self.tick, min(s.omega_max * self.tick, err))
            heading = wrap_angle(heading + turn)
        time_left = self.tick
        while time_left > 1e-12:
            tgt = wps[self._target]
            L = float(np.linalg.norm(tgt - pos))
            speed = s.v_max * self._leg_factor(pos, tgt, heading)
            if L <= speed * time_left:
                pos = tgt.copy()
                time_left -= L / speed
                if self._target == len(wps) - 1:
                    break
                self._target += 1
            else:
                pos = pos + (tgt - pos) * (speed * time_left / L)
                time_left = 0.0
        self.state = MavState(pos, heading, s.v_max, s.omega_max)
        arrived = bool(np.linalg.norm(wps[-1] - pos) <= self.arrival_tol)
        return self.state, arrived


def step_follower(follower: KinematicFollower, waypoints: np.ndarray) -> tuple[MavState, bool]:
    return follower.step(waypoints)
