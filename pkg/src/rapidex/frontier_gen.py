"""Safe frontier generation and maintenance.

A frontier is a Free voxel with at least ``k`` Unknown neighbours and no
Occupied neighbour. It is *safe* when no Occupied voxel lies within
Chebyshev distance ``m`` (voxels). Frontiers inside the cleaning sphere of
radius ``r`` around the vehicle are marked seen and withheld until the
vehicle moves away.

The book keeps dense boolean layers aligned with the map's storage block
and only re-evaluates voxels within ``m + 1`` of keys touched by a scan;
nothing outside that shell can change status.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from rapidex.voxel_map import OccupancyMap, UpdateDigest, VoxelKey


class LineageError(RuntimeError):
    """Digest does not belong to the map history the book tracks."""


@dataclass(frozen=True)
class FrontierParams:
    k: int = 4
    m: int = 2
    r: float = 6.0
    R: float = 10.0
    connectivity: int = 26

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if not 0 < self.r < self.R:
            raise ValueError("cleaning radius must satisfy 0 < r < R")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


def neighbour_kernel(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        kern = np.ones((3, 3, 3), np.int16)
    else:
        kern = ndimage.generate_binary_structure(3, 1).astype(np.int16)
    kern[1, 1, 1] = 0
    return kern


def evaluate_block(prob: np.ndarray, prior: float, params: FrontierParams):
    """Frontier and safe-frontier masks for a probability block.

    Cells outside ``prob`` are treated as Unknown; results within
    ``max(m, 1)`` of the block border are therefore only meaningful if the
    caller padded the block.
    """
    known = (prob != 0.0) & (prob != prior)
    occ = prob > prior
    free = known & (prob < prior)
    kern = neighbour_kernel(params.connectivity)
    unk_cnt = ndimage.convolve((~known).astype(np.int16), kern, mode="constant", cval=1)
    occ_cnt = ndimage.convolve(occ.astype(np.int16), kern, mode="constant", cval=0)
    cond = free & (unk_cnt >= params.k) & (occ_cnt == 0)
    if params.m > 0:
        near = ndimage.maximum_filter(occ, size=2 * params.m + 1, mode="constant", cval=False)
        safe = cond & ~near
    else:
        safe = cond.copy()
    return cond, safe


class FrontierBook:
    """Frontier sets F and SF plus the occupied set O, kept in step with one map."""

    def __init__(self, params: FrontierParams = FrontierParams(), map_id: Optional[int] = None):
        self.params = params
        self.map_id = map_id
        self.version = 0
        self._lo = np.zeros(3, np.int64)
        self._cond = np.zeros((0, 0, 0), bool)
        self._safe = np.zeros((0, 0, 0), bool)
        self._seen = np.zeros((0, 0, 0), bool)
        self._seen_idx = np.empty((0, 3), np.int64)
        self._occupied: set[VoxelKey] = set()
        self._rev = 0
        self._cache: dict = {}

    # -- alignment -----------------------------------------------------------

    def _align(self, grid_lo: np.ndarray, shape: tuple) -> None:
        if self._cond.shape == shape and np.array_equal(self._lo, grid_lo):
            return
        off = self._lo - grid_lo
        old_shape = self._cond.shape

        def moved(arr):
            out = np.zeros(shape, bool)
            if arr.size:
                sl = tuple(slice(int(off[i]), int(off[i] + old_shape[i])) for i in range(3))
                out[sl] = arr
            return out

        self._cond = moved(self._cond)
        self._safe = moved(self._safe)
        self._seen = moved(self._seen)
        self._seen_idx = self._seen_idx + off
        self._lo = np.asarray(grid_lo, np.int64).copy()

    # -- maintenance ------------------------------------------------------------

    def regenerate(self, omap: OccupancyMap, digest: UpdateDigest) -> "FrontierBook":
        """Re-evaluate frontier status in the shell around ``digest.touched``."""
        if self.map_id is None:
            self.map_id = omap.map_id
        if digest.map_id != self.map_id or omap.map_id != self.map_id:
            raise LineageError("digest belongs to a different map")
        if digest.version <= self.version or omap.version != digest.version:
            raise LineageError(
                f"digest version {digest.version} does not follow book version {self.version}"
                f" on map version {omap.version}"
            )
        self.version = digest.version
        self._align(omap.grid_lo, omap.grid.shape)
        for key in digest.changed:
            t = (int(key[0]), int(key[1]), int(key[2]))
            if omap.state_of(t) == 2:
                self._occupied.add(t)
            else:
                self._occupied.discard(t)
        if len(digest.touched) == 0:
            return self
        p = self.params
        reach = p.m + 1
        pad = max(p.m, 1)
        touched = np.asarray(digest.touched, np.int64)
        win_lo = touched.min(axis=0) - reach - pad
        win_hi = touched.max(axis=0) + reach + pad
        block = omap.window(win_lo, win_hi)
        cond, safe = evaluate_block(block, omap.prior, p)
        mask = np.zeros(block.shape, bool)
        mask[tuple((touched - win_lo).T)] = True
        mask = ndimage.maximum_filter(mask, size=2 * reach + 1, mode="constant", cval=False)
        # restrict to the map's storage block; cells outside it are Unknown
        a = np.maximum(win_lo, self._lo)
        b = np.minimum(win_hi, self._lo + np.array(self._cond.shape) - 1)
        src = tuple(slice(int(a[i] - win_lo[i]), int(b[i] - win_lo[i] + 1)) for i in range(3))
        dst = tuple(slice(int(a[i] - self._lo[i]), int(b[i] - self._lo[i] + 1)) for i in range(3))
        msk = mask[src]
        self._cond[dst][msk] = cond[src][msk]
        self._safe[dst][msk] = safe[src][msk]
        self._rev += 1
        return self

    def clean_seen(self, mav_pos: Sequence[float], omap: OccupancyMap) -> "FrontierBook":
        """Withhold frontiers strictly inside the cleaning sphere around ``mav_pos``.

        Previously seen keys that are now outside the sphere are released and
        count again if they still satisfy the frontier conditions.
        """
        self._align(omap.grid_lo, omap.grid.shape)
        if len(self._seen_idx):
            self._seen[tuple(self._seen_idx.T)] = False
        pos = np.asarray(mav_pos, float)
        rv = self.params.r / omap.v_res
        c = (pos - omap.origin) / omap.v_res - 0.5 - self._lo
        lo = np.maximum(np.floor(c - rv).astype(np.int64), 0)
        hi = np.minimum(np.ceil(c + rv).astype(np.int64), np.array(self._cond.shape) - 1)
        new_idx = np.empty((0, 3), np.int64)
        if np.all(lo <= hi):
            sl = tuple(slice(int(lo[i]), int(hi[i]) + 1) for i in range(3))
            idx = np.argwhere(self._cond[sl]) + lo
            if len(idx):
                centers = omap.centers_of(idx + self._lo)
                d2 = np.sum((centers - pos) ** 2, axis=1)
                new_idx = idx[d2 < self.params.r**2]
        self._seen_idx = new_idx
        if len(new_idx):
            self._seen[tuple(new_idx.T)] = True
        self._rev += 1
        return self

    # -- views ----------------------------------------------------------------------

    def _keys(self, name: str, layer: np.ndarray) -> np.ndarray:
        hit = self._cache.get(name)
        if hit is not None and hit[0] == self._rev:
            return hit[1]
        keys = np.argwhere(layer & ~self._seen) + self._lo
        self._cache[name] = (self._rev, keys)
        return keys

    def frontier_keys(self) -> np.ndarray:
        """F as an (n, 3) array, lexicographically sorted."""
        return self._keys("F", self._cond)

    def safe_keys(self) -> np.ndarray:
        """SF as an (n, 3) array, lexicographically sorted."""
        return self._keys("SF", self._safe)

    @property
    def F(self) -> set[VoxelKey]:
        return {tuple(k) for k in self.frontier_keys().tolist()}

    @property
    def SF(self) -> set[VoxelKey]:
        return {tuple(k) for k in self.safe_keys().tolist()}

    @property
    def O(self) -> set[VoxelKey]:
        return set(self._occupied)

    @property
    def seen(self) -> set[VoxelKey]:
        return {tuple(k) for k in (self._seen_idx + self._lo).tolist()}

    def is_safe_frontier(self, key: Sequence[int]) -> bool:
        idx = np.asarray(key, np.int64) - self._lo
        if np.any(idx < 0) or np.any(idx >= self._cond.shape):
            return False
        t = tuple(idx)
        return bool(self._safe[t] and not self._seen[t])

    def is_withheld(self, key: Sequence[int]) -> bool:
        """True if ``key`` meets the safe-frontier conditions but sits inside the cleaning sphere."""
        idx = np.asarray(key, np.int64) - self._lo
        if np.any(idx < 0) or np.any(idx >= self._cond.shape):
            return False
        t = tuple(idx)
        return bool(self._safe[t] and self._seen[t])

    def dumps(self) -> str:
        lines = [f"F {k[0]} {k[1]} {k[2]}" for k in self.frontier_keys().tolist()]
        lines += [f"SF {k[0]} {k[1]} {k[2]}" for k in self.safe_keys().tolist()]
        return "\n".join(lines) + ("\n" if lines else "")


def regenerate_frontiers(omap: OccupancyMap, digest: UpdateDigest, book: FrontierBook) -> FrontierBook:
    return book.regenerate(omap, digest)


def clean_seen(book: FrontierBook, mav_pos: Sequence[float], omap: OccupancyMap) -> FrontierBook:
    return book.clean_seen(mav_pos, omap)


def occupied_set(book: FrontierBook) -> set[VoxelKey]:
    return book.O


def full_rescan(omap: OccupancyMap, params: FrontierParams) -> tuple[set, set]:
    """(F, SF) from scratch over the whole map, ignoring the seen record."""
    if not omap.grid.size:
        return set(), set()
    pad = max(params.m, 1) + 1
    lo = omap.grid_lo - pad
    hi = omap.grid_lo + np.array(omap.grid.shape) - 1 + pad
    cond, safe = evaluate_block(omap.window(lo, hi), omap.prior, params)
    F = {tuple(k) for k in (np.argwhere(cond) + lo).tolist()}
    SF = {tuple(k) for k in (np.argwhere(safe) + lo).tolist()}
    return F, SF
