"""Local/global frontier classification and Next-Best-Frontier choice.

Frontiers inside the sensor's horizontal and vertical field of view form
the local set and are ranked by obstacle clearance and yaw offset. When
none are in view the global set is ranked by yaw offset, height change
and distance. No frontiers at all means exploration is over and the
caller should fly home.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from rapidex.voxel_map import OccupancyMap, VoxelKey


def wrap_angle(a: float) -> float:
    """Wrap into [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi after the shift
    return -math.pi if w >= math.pi else w


@dataclass
class MavState:
    position: np.ndarray
    heading: float = 0.0
    v_max: float = 1.5
    omega_max: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.heading = wrap_angle(self.heading)
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.omega_max <= 0:
            raise ValueError("omega_max must be positive")


@dataclass(frozen=True)
class CostWeights:
    W_o: float = 1.0
    W_h: float = 1.0
    W_z: float = 2.0
    W_d: float = 0.5
    H_theta: float = 2.0 * math.pi / 3.0
    V_beta: float = math.pi / 6.0
    full_vertical_angle: bool = False  # compare gamma against V_beta instead of V_beta/2
    T_hover: float = 0.0  # reporting only

    def __post_init__(self):
        if self.W_o <= 0:
            raise ValueError("W_o must be positive")
        if min(self.W_h, self.W_z, self.W_d) < 0:
            raise ValueError("weights must be non-negative")
        if not 0 < self.H_theta <= 2 * math.pi:
            raise ValueError("H_theta must lie in (0, 2pi]")
        if not 0 < self.V_beta <= math.pi:
            raise ValueError("V_beta must lie in (0, pi]")

    @property
    def vertical_limit(self) -> float:
        return self.V_beta if self.full_vertical_angle else self.V_beta / 2.0


class Mode(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"
    EXHAUSTED = "exhausted"


@dataclass(frozen=True)
class SelectionResult:
    mode: Mode
    key: Optional[VoxelKey] = None
    cost: float = math.nan
    alpha: float = math.nan
    gamma: float = math.nan
    d_obs: float = math.nan
    n_local: int = 0
    n_global: int = 0


def relative_angles(f: Sequence[float], s: MavState) -> tuple[float, float]:
    """Bearing offset from the heading and elevation angle of ``f`` seen from the MAV."""
    dx = f[0] - s.position[0]
    dy = f[1] - s.position[1]
    dz = f[2] - s.position[2]
    if dx == 0.0 and dy == 0.0 and dz == 0.0:
        raise ValueError("frontier coincides with the MAV position")
    alpha = wrap_angle(math.atan2(dy, dx) - s.heading)
    gamma = math.atan2(abs(dz), math.hypot(dx, dy))
    return alpha, gamma


def footprint_gamma(f: Sequence[float], s: MavState, h: float) -> Optional[float]:
    """Literal arccos(h / (2 dz)) form of the vertical angle.

    Returns None where the argument leaves arccos' domain or dz is zero,
    i.e. where that form cannot classify the frontier.
    """
    dz = f[2] - s.position[2]
    if dz == 0.0:
        return None
    arg = h / (2.0 * dz)
    if not -1.0 <= arg <= 1.0:
        return None
    return math.acos(arg)


def in_view(alpha: float, gamma: float, w: CostWeights) -> bool:
    return abs(alpha) <= w.H_theta / 2.0 and gamma <= w.vertical_limit


def classify(
    frontiers: Iterable[Sequence[float]], s: MavState, w: CostWeights
) -> tuple[list[int], list[int]]:
    """Split frontier positions into (local, global) index lists."""
    local, glob = [], []
    for i, f in enumerate(frontiers):
        a, g = relative_angles(f, s)
        (local if in_view(a, g, w) else glob).append(i)
    return local, glob


def local_cost(alpha: float, d_obs: Optional[float], w: CostWeights) -> float:
    """Avoidance plus heading cost; no obstacle in range means no avoidance term."""
    avoid = 0.0 if d_obs is None else 1.0 / (w.W_o * d_obs)
    return avoid + w.W_h * abs(alpha)


def global_cost(f: Sequence[float], s: MavState, alpha: float, w: CostWeights) -> float:
    dx = f[0] - s.position[0]
    dy = f[1] - s.position[1]
    dz = f[2] - s.position[2]
    return w.W_h * abs(alpha) + w.W_z * abs(dz) + w.W_d * math.sqrt(dx * dx + dy * dy + dz * dz)


def select_nbf(
    keys,
    s: MavState,
    omap: OccupancyMap,
    w: CostWeights,
    sensor_range: float,
) -> SelectionResult:
    """Pick the Next Best Frontier among safe-frontier ``keys``.

    ``keys`` is a key array or a FrontierBook, whose safe frontiers are used.
    Local frontiers win whenever any exist. Ties on cost go to the
    lexicographically smallest key.
    """
    if hasattr(keys, "safe_keys"):
        keys = keys.safe_keys()
    keys = np.asarray(keys, np.int64).reshape(-1, 3)
    if len(keys) == 0:
        return SelectionResult(Mode.EXHAUSTED)
    centers = omap.centers_of(keys).tolist()
    key_list = [tuple(k) for k in keys.tolist()]
    angles = []
    local, glob = [], []
    for i, c in enumerate(centers):
        a, g = relative_angles(c, s)
        angles.append((a, g))
        (local if in_view(a, g, w) else glob).append(i)

    best = None
    if local:
        for i in local:
            a, g = angles[i]
            d = omap.nearest_occupied_key_dist(key_list[i], sensor_range)
            cand = (local_cost(a, d, w), key_list[i], i, d)
            if best is None or cand[:2] < best[:2]:
                best = cand
        mode = Mode.LOCAL
    else:
        for i in glob:
            a, g = angles[i]
            cand = (global_cost(centers[i], s, a, w), key_list[i], i, None)
            if best is None or cand[:2] < best[:2]:
                best = cand
        mode = Mode.GLOBAL
    cost, key, i, d = best
    return SelectionResult(
        mode,
        key,
        cost,
        angles[i][0],
        angles[i][1],
        math.nan if d is None else d,
        len(local),
        len(glob),
    )
