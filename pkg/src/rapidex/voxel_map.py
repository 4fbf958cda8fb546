"""Probabilistic voxel occupancy map with ray-cast scan integration.

Leaf voxels live at a single resolution ``v_res``. Storage is a dense
numpy block that grows on demand; a stored probability of exactly 0.0
means "never observed" (Unknown), every observed voxel holds a value in
``[clamp_lo, clamp_hi]``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from rapidex import _kernels

VoxelKey = tuple[int, int, int]

_GROW_PAD = 16
_map_ids = itertools.count(1)


class VoxelState(enum.IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


class MapFormatError(ValueError):
    pass


def update_occupancy(
    prev: float,
    meas: float,
    prior: float,
    clamp_lo: float = 0.0,
    clamp_hi: float = 1.0,
) -> float:
    """Recursive Bayes update of an occupancy probability in odds form.

    With the default clamps the raw posterior is returned.

    >>> round(update_occupancy(0.5, 0.7, 0.5), 12)
    0.7
    """
    for name, v in (("prev", prev), ("meas", meas), ("prior", prior)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name}={v!r} outside (0, 1)")
    odds = ((1.0 - meas) / meas) * ((1.0 - prev) / prev) * (prior / (1.0 - prior))
    p = 1.0 / (1.0 + odds)
    return min(max(p, clamp_lo), clamp_hi)


def traverse_ray(
    a: Sequence[float],
    b: Sequence[float],
    v_res: float,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> list[VoxelKey]:
    """Every voxel crossed by segment a->b, in order, one axis step at a time."""
    ua = [(a[i] - origin[i]) / v_res for i in range(3)]
    ub = [(b[i] - origin[i]) / v_res for i in range(3)]
    if ua == ub:
        raise ValueError("zero-length segment")
    n = _kernels.traverse_count(*ua, *ub)
    out = np.empty((n, 3), np.int64)
    _kernels.traverse_into(*ua, *ub, out)
    return [tuple(int(c) for c in row) for row in out]


def neighbors26(key: VoxelKey) -> list[VoxelKey]:
    ix, iy, iz = key
    return [
        (ix + dx, iy + dy, iz + dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if dx or dy or dz
    ]


def neighbors6(key: VoxelKey) -> list[VoxelKey]:
    ix, iy, iz = key
    return [
        (ix - 1, iy, iz), (ix + 1, iy, iz),
        (ix, iy - 1, iz), (ix, iy + 1, iz),
        (ix, iy, iz - 1), (ix, iy, iz + 1),
    ]


@dataclass
class SensorScan:
    sensor_origin: np.ndarray
    endpoints: np.ndarray  # (n, 3) world points
    hits: np.ndarray  # (n,) bool

    @classmethod
    def from_rays(cls, origin, rays: Iterable[tuple[Sequence[float], bool]]) -> "SensorScan":
        rays = list(rays)
        pts = np.array([p for p, _ in rays], dtype=float).reshape(-1, 3)
        hits = np.array([h for _, h in rays], dtype=bool)
        return cls(np.asarray(origin, dtype=float), pts, hits)

    def __len__(self) -> int:
        return len(self.hits)


@dataclass
class UpdateDigest:
    """Keys touched by one scan and the subset whose state changed."""

    map_id: int
    version: int
    touched: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))
    changed: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))

    def touched_set(self) -> set[VoxelKey]:
        return {tuple(int(c) for c in k) for k in self.touched}

    def changed_set(self) -> set[VoxelKey]:
        return {tuple(int(c) for c in k) for k in self.changed}


class OccupancyMap:
    """Single-resolution occupancy map.

    Args:
        v_res: voxel edge length in meters.
        origin: world point of the corner of voxel (0, 0, 0).
        prior: occupancy prior ``P_n``, also the free/occupied threshold.
    """

    def __init__(
        self,
        v_res: float,
        origin: Sequence[float] = (0.0, 0.0, 0.0),
        prior: float = 0.5,
        p_hit: float = 0.7,
        p_miss: float = 0.4,
        clamp_lo: float = 0.12,
        clamp_hi: float = 0.97,
    ):
        if v_res <= 0:
            raise ValueError("v_res must be positive")
        if not 0.0 < clamp_lo < clamp_hi < 1.0:
            raise ValueError("clamps must satisfy 0 < lo < hi < 1")
        self.v_res = float(v_res)
        self.origin = np.asarray(origin, dtype=float)
        self.prior = prior
        self.p_hit = p_hit
        self.p_miss = p_miss
        self.clamp_lo = clamp_lo
        self.clamp_hi = clamp_hi
        self.map_id = next(_map_ids)
        self.version = 0
        self._lo = np.zeros(3, np.int64)
        self._prob = np.zeros((0, 0, 0))
        self._mark = np.zeros((0, 0, 0), np.int8)
        self._kdtree = None
        self._kdtree_version = -1

    # -- geometry ---------------------------------------------------------

    def key_of(self, p: Sequence[float]) -> VoxelKey:
        return tuple(int(math.floor((p[i] - self.origin[i]) / self.v_res)) for i in range(3))

    def center_of(self, key: Sequence[int]) -> np.ndarray:
        return self.origin + (np.asarray(key, dtype=float) + 0.5) * self.v_res

    def keys_of(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(pts, float) - self.origin) / self.v_res).astype(np.int64)

    def centers_of(self, keys: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(keys, dtype=float) + 0.5) * self.v_res

    # -- dense storage -----------------------------------------------------

    @property
    def grid_lo(self) -> np.ndarray:
        """Key of grid cell [0, 0, 0]."""
        return self._lo.copy()

    @property
    def grid(self) -> np.ndarray:
        """Raw probability block (0.0 = unknown). Treat as read-only."""
        return self._prob

    def ensure(self, key_lo: Sequence[int], key_hi: Sequence[int]) -> None:
        """Grow storage so every key in the inclusive box is addressable."""
        key_lo = np.asarray(key_lo, np.int64)
        key_hi = np.asarray(key_hi, np.int64)
        shape = np.array(self._prob.shape, np.int64)
        cur_hi = self._lo + shape - 1
        if self._prob.size and np.all(key_lo >= self._lo) and np.all(key_hi <= cur_hi):
            return
        if self._prob.size:
            new_lo = np.minimum(self._lo, key_lo - _GROW_PAD)
            new_hi = np.maximum(cur_hi, key_hi + _GROW_PAD)
        else:
            new_lo = key_lo - _GROW_PAD
            new_hi = key_hi + _GROW_PAD
        new_shape = tuple(int(v) for v in new_hi - new_lo + 1)
        prob = np.zeros(new_shape)
        off = self._lo - new_lo
        if self._prob.size:
            sl = tuple(slice(int(off[i]), int(off[i] + shape[i])) for i in range(3))
            prob[sl] = self._prob
        self._prob = prob
        self._mark = np.zeros(new_shape, np.int8)
        self._lo = new_lo

    def window(self, key_lo: Sequence[int], key_hi: Sequence[int]) -> np.ndarray:
        """Copy of probabilities over an inclusive key box; unallocated cells read 0."""
        key_lo = np.asarray(key_lo, np.int64)
        key_hi = np.asarray(key_hi, np.int64)
        shape = tuple(int(v) for v in key_hi - key_lo + 1)
        out = np.zeros(shape)
        if not self._prob.size:
            return out
        a = np.maximum(key_lo, self._lo)
        b = np.minimum(key_hi, self._lo + np.array(self._prob.shape) - 1)
        if np.any(a > b):
            return out
        src = tuple(slice(int(a[i] - self._lo[i]), int(b[i] - self._lo[i] + 1)) for i in range(3))
        dst = tuple(slice(int(a[i] - key_lo[i]), int(b[i] - key_lo[i] + 1)) for i in range(3))
        out[dst] = self._prob[src]
        return out

    def states(self, prob: np.ndarray) -> np.ndarray:
        """Vectorized VoxelState codes for an array of stored probabilities."""
        s = np.zeros(prob.shape, np.int8)
        known = prob != 0.0
        s[known & (prob < self.prior)] = VoxelState.FREE
        s[known & (prob > self.prior)] = VoxelState.OCCUPIED
        return s

    # -- queries ------------------------------------------------------------

    def probability(self, key: VoxelKey) -> Optional[float]:
        idx = np.asarray(key, np.int64) - self._lo
        if np.any(idx < 0) or np.any(idx >= self._prob.shape):
            return None
        p = float(self._prob[tuple(idx)])
        return p if p != 0.0 else None

    def state_of(self, key: VoxelKey) -> VoxelState:
        p = self.probability(key)
        if p is None or p == self.prior:
            return VoxelState.UNKNOWN
        return VoxelState.FREE if p < self.prior else VoxelState.OCCUPIED

    def cells(self) -> dict[VoxelKey, float]:
        idx = np.argwhere(self._prob != 0.0)
        vals = self._prob[tuple(idx.T)]
        keys = idx + self._lo
        return {tuple(int(c) for c in k): float(v) for k, v in zip(keys, vals)}

    def __len__(self) -> int:
        return int(np.count_nonzero(self._prob))

    def count_states(self) -> tuple[int, int]:
        """(#Free, #Occupied)."""
        p = self._prob
        known = p != 0.0
        return int(np.count_nonzero(known & (p < self.prior))), int(
            np.count_nonzero(p > self.prior)
        )

    def explored_volume(self) -> float:
        nf, no = self.count_states()
        return (nf + no) * self.v_res**3

    def occupied_keys(self) -> np.ndarray:
        """Occupied keys as an (n, 3) array in lexicographic order."""
        return np.argwhere(self._prob > self.prior) + self._lo

    def free_keys(self) -> np.ndarray:
        p = self._prob
        return np.argwhere((p != 0.0) & (p < self.prior)) + self._lo

    def occupied_tree(self) -> Optional[cKDTree]:
        """KD-tree over occupied keys (integer coordinates); cached per version."""
        if self._kdtree_version != self.version:
            occ = self.occupied_keys()
            self._kdtree = cKDTree(occ.astype(float)) if len(occ) else None
            self._kdtree_occ = occ
            self._kdtree_version = self.version
        return self._kdtree

    def nearest_occupied(
        self, p: Sequence[float], radius: float
    ) -> Optional[tuple[VoxelKey, float]]:
        """Closest Occupied voxel center within ``radius`` (inclusive) of ``p``."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        tree = self.occupied_tree()
        if tree is None:
            return None
        q = (np.asarray(p, float) - self.origin) / self.v_res - 0.5
        d, _ = tree.query(q)
        if not np.isfinite(d) or d * self.v_res > radius * (1 + 1e-9) + 1e-12:
            return None
        cand = tree.query_ball_point(q, d * (1 + 1e-9) + 1e-12)
        best = None
        for i in cand:
            key = tuple(int(c) for c in self._kdtree_occ[i])
            dist = float(np.sqrt(np.sum((self.center_of(key) - np.asarray(p, float)) ** 2)))
            if dist > radius:
                continue
            if best is None or (dist, key) < (best[1], best[0]):
                best = (key, dist)
        return best

    def nearest_occupied_key_dist(self, key: VoxelKey, radius: float) -> Optional[float]:
        """Distance between ``key``'s center and the nearest Occupied center, if within radius.

        Computed as ``v_res * sqrt(integer squared index distance)`` so equal
        geometric distances compare exactly equal.
        """
        tree = self.occupied_tree()
        if tree is None:
            return None
        d, i = tree.query(np.asarray(key, float))
        if not np.isfinite(d):
            return None
        diff = self._kdtree_occ[i] - np.asarray(key, np.int64)
        dsq = int(diff @ diff)
        # kd-tree float distance can misorder near-equal integer distances
        for j in tree.query_ball_point(np.asarray(key, float), math.sqrt(dsq) + 1e-6):
            diff = self._kdtree_occ[j] - np.asarray(key, np.int64)
            dsq = min(dsq, int(diff @ diff))
        dist = self.v_res * math.sqrt(dsq)
        return dist if dist <= radius else None

    # -- updates ------------------------------------------------------------

    def integrate_scan(self, scan: SensorScan) -> UpdateDigest:
        """Fuse one scan: misses along each ray, a hit at hit endpoints.

        Each voxel gets at most one update per scan and a hit overrides a
        miss. The digest lists touched keys and the keys whose state changed.
        """
        self.version += 1
        if len(scan) == 0:
            return UpdateDigest(self.map_id, self.version)
        sensor = np.asarray(scan.sensor_origin, float)
        ends = np.asarray(scan.endpoints, float).reshape(-1, 3)
        pts = np.vstack([sensor[None, :], ends])
        keys = self.keys_of(pts)
        self.ensure(keys.min(axis=0) - 1, keys.max(axis=0) + 1)
        base = self.origin + self._lo * self.v_res
        s_u = (sensor - base) / self.v_res
        e_u = (ends - base) / self.v_res
        touched, changed = _kernels.integrate_rays(
            self._prob,
            self._mark,
            s_u,
            e_u,
            np.asarray(scan.hits, bool),
            self.prior,
            self.p_hit,
            self.p_miss,
            self.clamp_lo,
            self.clamp_hi,
        )
        return UpdateDigest(self.map_id, self.version, touched + self._lo, changed + self._lo)

    def set_probability(self, key: VoxelKey, p: float) -> None:
        """Directly store a probability (fixtures and map loading)."""
        if not 0.0 < p < 1.0:
            raise ValueError("probability must lie in (0, 1)")
        self.ensure(key, key)
        self._prob[tuple(np.asarray(key, np.int64) - self._lo)] = p
        self.version += 1

    def snapshot(self) -> "OccupancyMap":
        other = OccupancyMap.__new__(OccupancyMap)
        other.__dict__.update(self.__dict__)
        other._prob = self._prob.copy()
        other._prob.flags.writeable = False
        other._mark = np.zeros((0, 0, 0), np.int8)
        other._kdtree = None
        other._kdtree_version = -1
        return other

    # -- text dump ------------------------------------------------------------

    def dumps(self) -> str:
        ox, oy, oz = (repr(float(v)) for v in self.origin)
        lines = [f"voxmap v1 {self.v_res!r} {ox} {oy} {oz}"]
        idx = np.argwhere(self._prob != 0.0)
        vals = self._prob[tuple(idx.T)]
        keys = idx + self._lo
        lines.extend(
            f"{k[0]} {k[1]} {k[2]} {v:.9f}" for k, v in zip(keys.tolist(), vals.tolist())
        )
        return "\n".join(lines) + "\n"

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, **kwargs) -> "OccupancyMap":
        lines = text.splitlines()
        if not lines:
            raise MapFormatError("empty map dump")
        head = lines[0].split()
        if len(head) != 6 or head[0] != "voxmap" or head[1] != "v1":
            raise MapFormatError(f"bad header: {lines[0]!r}")
        m = cls(float(head[2]), (float(head[3]), float(head[4]), float(head[5])), **kwargs)
        rows = [ln.split() for ln in lines[1:] if ln.strip()]
        if rows:
            keys = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], np.int64)
            vals = np.array([float(r[3]) for r in rows])
            m.ensure(keys.min(axis=0), keys.max(axis=0))
            m._prob[tuple((keys - m._lo).T)] = vals
            m.version += 1
        return m

    @classmethod
    def load(cls, path, **kwargs) -> "OccupancyMap":
        with open(path) as fh:
            return cls.loads(fh.read(), **kwargs)
