"""Closed-loop exploration missions: scan, map, frontiers, select, plan, fly."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from rapidex.frontier_gen import FrontierBook, FrontierParams
from rapidex.frontier_select import (
    CostWeights,
    MavState,
    Mode,
    in_view,
    relative_angles,
    select_nbf,
)
from rapidex.global_planner import (
    Path,
    PlanRequest,
    StartNotTraversable,
    compute_homing_path,
    is_traversable,
    plan,
    replan_needed,
    traversable_block,
)
from rapidex.sim_env import (
    DEFAULT_PARAMS,
    WORLD_KINDS,
    KinematicFollower,
    LidarSpec,
    WorldModel,
    generate_world,
    simulate_scan,
)
from rapidex.voxel_map import OccupancyMap

log = logging.getLogger(__name__)

MAX_PLAN_ATTEMPTS = 25


class ConfigError(ValueError):
    pass


class MissionSetupError(RuntimeError):
    pass


@dataclass
class MissionConfig:
    # world source
    world: str = ""
    gen: str = "corridor"
    seed: int = 0
    gen_params: dict = field(default_factory=dict)
    truth_res: float = 0.0  # 0 -> res / 2
    home: Optional[tuple] = None  # default: world start point
    # map
    res: float = 0.5
    prior: float = 0.5
    p_hit: float = 0.7
    p_miss: float = 0.4
    clamp_lo: float = 0.12
    clamp_hi: float = 0.97
    # frontiers
    k: int = 4
    m: int = 2
    r: float = 0.0  # 0 -> 0.6 * R
    R: float = 10.0
    # selection
    W_o: float = 1.0
    W_h: float = 1.0
    W_z: float = 2.0
    W_d: float = 0.5
    H_theta: float = 2.0 * math.pi / 3.0
    V_beta: float = math.pi / 6.0
    full_vertical_angle: bool = False
    T_hover: float = 0.0
    # lidar
    lidar_h_rays: int = 360
    lidar_v_rays: int = 16
    lidar_rate: float = 10.0
    lidar_noise: float = 0.0
    # vehicle
    v_max: float = 1.5
    omega_max: float = 1.0
    heading: float = 0.0
    arrival_tol: float = 0.05
    # mission
    duration: float = 300.0
    decision_period: float = 1.0
    avoid_unknown: bool = True  # prefer paths whose margin zone is fully observed
    revisit_threshold: float = 0.35  # regression guard for revisit_fraction
    out: str = ""

    def __post_init__(self):
        if self.r == 0.0:
            self.r = 0.6 * self.R
        if self.truth_res == 0.0:
            self.truth_res = self.res / 2.0
        self.validate()

    def validate(self) -> None:
        if self.res <= 0:
            raise ConfigError("res must be positive")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if not 0 < self.r < self.R:
            raise ConfigError(f"cleaning radius r={self.r} must satisfy 0 < r < R={self.R}")
        if not self.world and self.gen not in WORLD_KINDS:
            raise ConfigError(f"unknown generator {self.gen!r}")
        if not self.world:
            bad = set(self.gen_params) - set(DEFAULT_PARAMS[self.gen])
            if bad:
                raise ConfigError(f"unknown gen.* keys for {self.gen}: {sorted(bad)}")

    # -- derived pieces --------------------------------------------------------

    @property
    def tick(self) -> float:
        return 1.0 / self.lidar_rate

    def frontier_params(self) -> FrontierParams:
        return FrontierParams(k=self.k, m=self.m, r=self.r, R=self.R)

    def weights(self) -> CostWeights:
        return CostWeights(
            self.W_o, self.W_h, self.W_z, self.W_d, self.H_theta, self.V_beta,
            self.full_vertical_angle, self.T_hover,
        )

    def lidar(self) -> LidarSpec:
        return LidarSpec(
            self.R, self.lidar_h_rays, self.lidar_v_rays, self.V_beta, self.lidar_rate,
            self.lidar_noise,
        )

    def make_world(self) -> WorldModel:
        if self.world:
            return WorldModel.load(self.world)
        params = {"res": self.truth_res, **self.gen_params}
        return generate_world(self.gen, self.seed, params)

    def replace(self, **kw) -> "MissionConfig":
        return dataclasses.replace(self, **kw)


# -- config file ------------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(MissionConfig)}
_FILE_KEYS = set(_FIELD_TYPES) - {"gen_params"}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if key == "home":
            vals = tuple(float(v) for v in raw.replace(",", " ").split())
            if len(vals) != 3:
                raise ValueError(raw)
            return vals
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; ``gen.<param>`` sets generator params."""
    values: dict = {}
    gen_params: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("gen."):
            try:
                gen_params[key[4:]] = float(raw)
            except ValueError:
                raise ConfigError(f"line {n}: bad value for {key}: {raw!r}") from None
            continue
        if key not in _FILE_KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    if gen_params:
        values["gen_params"] = gen_params
    return values


def load_config(path: Optional[str] = None, **overrides) -> MissionConfig:
    values = {}
    if path:
        with open(path) as fh:
            values = parse_config_text(fh.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return MissionConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- log --------------------------------------------------------------------------

LOG_COLUMNS = (
    "t", "x", "y", "z", "yaw", "volume", "distance", "n_local", "n_global", "mode",
    "collision", "margin_violation",
)
SELECTION_COLUMNS = ("t", "mode", "fx", "fy", "fz", "cost", "alpha", "gamma", "d_obs")


@dataclass
class MissionLog:
    rows: list = field(default_factory=list)
    selections: list = field(default_factory=list)
    cpu: list = field(default_factory=list)  # (t, seconds) frontier+selection+planning per tick

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    @property
    def final_mode(self) -> str:
        return self.rows[-1][LOG_COLUMNS.index("mode")] if self.rows else ""


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


@dataclass
class MissionResult:
    config: MissionConfig
    world: WorldModel
    map: OccupancyMap
    log: MissionLog
    home: np.ndarray
    homing_ok: bool = False
    collisions: int = 0
    margin_violations: int = 0
    unsafe_waypoints: int = 0
    min_clearance: float = math.inf
    plans: int = 0

    @property
    def completed(self) -> bool:
        return self.log.final_mode == "done"

    def mission_csv(self) -> str:
        return _csv(LOG_COLUMNS, self.log.rows)

    def trajectory_csv(self) -> str:
        idx = [LOG_COLUMNS.index(c) for c in ("t", "x", "y", "z", "yaw")]
        return _csv(("t", "x", "y", "z", "yaw"), [[r[i] for i in idx] for r in self.log.rows])

    def selections_csv(self) -> str:
        return _csv(SELECTION_COLUMNS, self.log.selections)

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        files = {
            "mission.csv": self.mission_csv(),
            "trajectory.csv": self.trajectory_csv(),
            "map.voxmap": self.map.dumps(),
            "selections.csv": self.selections_csv(),
            "timing.csv": _csv(("t", "cpu_s"), self.log.cpu),
        }
        for name, text in files.items():
            with open(os.path.join(out_dir, name), "w") as fh:
                fh.write(text)


# -- mission loop -------------------------------------------------------------------


def _count_views(book: FrontierBook, omap: OccupancyMap, s: MavState, w: CostWeights, exclude):
    keys = book.safe_keys()
    n_local = n_global = 0
    for key, c in zip(keys.tolist(), omap.centers_of(keys).tolist()):
        if tuple(key) in exclude:
            continue
        a, g = relative_angles(c, s)
        if in_view(a, g, w):
            n_local += 1
        else:
            n_global += 1
    return n_local, n_global


def run_mission(
    config: MissionConfig,
    world: Optional[WorldModel] = None,
    on_tick: Optional[Callable[[float, MavState, OccupancyMap, FrontierBook], None]] = None,
) -> MissionResult:
    """Fly one exploration mission; deterministic in ``config``.

    ``on_tick`` observes the state after each tick's map and frontier update.
    """
    world = world if world is not None else config.make_world()
    home = np.asarray(config.home if config.home is not None else world.start, float)
    if world.is_occupied(home):
        raise MissionSetupError(f"start pose {home.tolist()} is in occupied space")

    omap = OccupancyMap(
        config.res, world.bounds_min, config.prior, config.p_hit, config.p_miss,
        config.clamp_lo, config.clamp_hi,
    )
    book = FrontierBook(config.frontier_params())
    weights = config.weights()
    lidar = config.lidar()
    dirs_cache: dict = {}
    rng = np.random.default_rng(config.seed)
    state = MavState(home, config.heading, config.v_max, config.omega_max)
    follower = KinematicFollower(state, config.tick, config.arrival_tol)
    result = MissionResult(config, world, omap, MissionLog(), home)
    rows = result.log.rows
    margin_m = config.m * config.res

    mode = "explore-local"
    path: Optional[Path] = None
    goal = None  # selected frontier; a committed path may stop short of it
    following: Optional[Path] = None
    arrived = False
    next_decision = 0.0
    blacklist: set = set()
    distance = 0.0
    tick = 0
    while True:
        t = tick * config.tick
        if t >= config.duration - 1e-9 and tick > 0:
            break
        state = follower.state
        # lidar pattern only depends on heading; reuse arrays between ticks
        dirs = dirs_cache.get(state.heading)
        if dirs is None:
            dirs_cache.clear()
            dirs = dirs_cache[state.heading] = lidar.directions(state.heading)
        scan = simulate_scan(world, lidar, state, rng, dirs)
        digest = omap.integrate_scan(scan)
        c0 = time.process_time()
        book.regenerate(omap, digest)
        book.clean_seen(state.position, omap)
        if blacklist and len(digest.changed):
            blacklist = _expire_blacklist(blacklist, digest.changed, config.m + 1)

        remaining = path.keys[follower.target_index:] if path is not None else []
        if mode.startswith("explore"):
            # a goal withheld only for being inside the cleaning sphere is still
            # unobserved; keep flying to it instead of flip-flopping at the sphere edge
            committed = goal is not None and book.is_withheld(goal)
            due = (
                path is None
                or arrived
                or t >= next_decision - 1e-9
                or replan_needed(omap, remaining, digest, config.m)
            )
            if due and committed:
                new_path = None if arrived else _replan(omap, state, goal, config, result)
                if new_path is None:
                    # reached the edge of observed space: park the goal until
                    # the map changes near it
                    blacklist.add(goal)
                else:
                    next_decision = t + config.decision_period
                    path = new_path
                    due = False
            if due:
                next_decision = t + config.decision_period
                sel, new_path = _choose(omap, book, state, weights, config, blacklist, result)
                if sel.mode is Mode.EXHAUSTED:
                    mode = "homing"
                    path = _homing(omap, state, home, config, result)
                    arrived = False
                    if path is None:
                        mode = "done"
                elif new_path is not None:
                    mode = "explore-" + sel.mode.value
                    path = new_path
                    goal = sel.key
                    arrived = False
                f = omap.center_of(sel.key) if sel.key is not None else (math.nan,) * 3
                result.log.selections.append(
                    [t, sel.mode.value, float(f[0]), float(f[1]), float(f[2]),
                     sel.cost, sel.alpha, sel.gamma, sel.d_obs]
                )
        elif mode == "homing":
            if arrived:
                mode = "done"
                result.homing_ok = True
            elif replan_needed(omap, remaining, digest, config.m):
                new_path = _homing(omap, state, home, config, result)
                if new_path is None:
                    mode = "done"
                path = new_path
        n_local, n_global = _count_views(book, omap, state, weights, blacklist)
        result.log.cpu.append((t, time.process_time() - c0))
        if on_tick is not None:
            on_tick(t, state, omap, book)

        collision = world.is_occupied(state.position)
        clearance = world.chebyshev_clearance(state.position, margin_m + world.v_res)
        result.min_clearance = min(result.min_clearance, clearance)
        violation = clearance < margin_m
        result.collisions += collision
        result.margin_violations += violation
        rows.append([
            t, *(float(v) for v in state.position), state.heading, omap.explored_volume(),
            distance, n_local, n_global, mode, collision, violation,
        ])
        if collision:
            log.error("collision at t=%.1f pos=%s", t, state.position.tolist())
        if mode == "done":
            break
        if path is not None and path is not following:
            # the vehicle is already inside the first waypoint's voxel
            follower.follow(path.waypoints, 1)
            following = path
        if path is not None and not arrived:
            prev = state.position
            state, arrived = follower.step(path.waypoints)
            distance += float(np.linalg.norm(state.position - prev))
        tick += 1
    return result


def _expire_blacklist(blacklist: set, changed: np.ndarray, reach: int) -> set:
    keys = np.array(sorted(blacklist), np.int64)
    ch = np.asarray(changed, np.int64)
    keep = set()
    for key in keys:
        if not np.any(np.max(np.abs(ch - key), axis=1) <= reach):
            keep.add(tuple(int(c) for c in key))
    return keep


def _check_path(omap: OccupancyMap, path: Path, margin: int, result: MissionResult) -> None:
    result.plans += 1
    for key in path.keys[1:-1]:
        if not is_traversable(omap, key, margin):
            result.unsafe_waypoints += 1


def _choose(omap, book, state, weights, config, blacklist, result):
    """Select an NBF and plan to it, blacklisting unreachable picks."""
    keys = book.safe_keys()
    if blacklist:
        keys = np.array([k for k in keys.tolist() if tuple(k) not in blacklist], np.int64)
    keys = keys.reshape(-1, 3)
    for _ in range(MAX_PLAN_ATTEMPTS):
        sel = select_nbf(keys, state, omap, weights, config.R)
        if sel.mode is Mode.EXHAUSTED:
            return sel, None
        try:
            path = plan(omap, PlanRequest(tuple(state.position), sel.key, config.m),
                        allow_unsafe_start=True, avoid_unknown=config.avoid_unknown)
        except StartNotTraversable:
            log.warning("vehicle voxel not traversable at %s", state.position.tolist())
            return sel, None
        if path is not None:
            _check_path(omap, path, config.m, result)
            return sel, path
        blacklist.add(sel.key)
        keys = keys[np.any(keys != np.array(sel.key), axis=1)]
    return sel, None


def _replan(omap, state, goal, config, result) -> Optional[Path]:
    """Re-route to a committed goal, stopping where the margin zone turns unobserved.

    Frontiers border Unknown space, so the last metres before one may hide
    rock. Returns None once no step into fully observed space remains.
    """
    try:
        path = plan(omap, PlanRequest(tuple(state.position), goal, config.m),
                    allow_unsafe_start=True, avoid_unknown=config.avoid_unknown)
    except StartNotTraversable:
        return None
    if path is None:
        return None
    keys = np.asarray(path.keys, np.int64)
    m = config.m
    lo, hi = keys.min(axis=0), keys.max(axis=0)
    strict = traversable_block(omap.window(lo - m, hi + m), omap.prior, m, avoid_unknown=True)
    ok = strict[tuple((keys - lo + m).T)]
    n = 1
    while n < len(keys) and ok[n]:
        n += 1
    if n == 1:
        return None
    if n < len(keys):
        wp = path.waypoints[:n]
        path = Path(wp, path.keys[:n], float(np.sum(np.linalg.norm(np.diff(wp, axis=0), axis=1))))
    _check_path(omap, path, m, result)
    return path


def _homing(omap, state, home, config, result) -> Optional[Path]:
    try:
        path = compute_homing_path(
            omap, state.position, home, config.m, avoid_unknown=config.avoid_unknown
        )
    except StartNotTraversable:
        log.warning("cannot plan home from %s", state.position.tolist())
        return None
    if path is not None:
        _check_path(omap, path, config.m, result)
    return path


def revisit_fraction(result: MissionResult, window: Optional[float] = None) -> float:
    """Share of exploring ticks spent within r of a pose from at least ``window`` seconds earlier.

    ``window`` defaults to 2 r / v_max, the time needed to fly out of the
    cleaning sphere, so ordinary forward progress never counts as a revisit.
    """
    cfg = result.config
    window = 2.0 * cfg.r / cfg.v_max if window is None else window
    mode_i = LOG_COLUMNS.index("mode")
    rows = [row for row in result.log.rows if row[mode_i].startswith("explore")]
    if not rows:
        return 0.0
    t = np.array([row[0] for row in rows])
    pos = np.array([row[1:4] for row in rows], float)
    revisits = 0
    for i in range(len(rows)):
        earlier = pos[t <= t[i] - window]
        if len(earlier) and np.min(np.linalg.norm(earlier - pos[i], axis=1)) <= cfg.r:
            revisits += 1
    return revisits / len(rows)


def coverage_report(result: MissionResult) -> float:
    return coverage(result.map, result.world, result.home)


def coverage(omap: OccupancyMap, world: WorldModel, start) -> float:
    """Fraction of reachable free space, at map resolution, that the map holds as Free.

    A map voxel is ground-truth free when its whole footprint is free in the
    truth grid, and reachable when the truth voxel under its center is
    26-connected to ``start``. Map voxels straddling a wall are excluded:
    Occupied is the correct label for them.
    """
    reach = world.reachable(start)
    lo = omap.keys_of(world.bounds_min[None, :])[0]
    hi = omap.keys_of(world.bounds_max[None, :] - 1e-9)[0]
    ax = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    K = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 3)
    corner = omap.origin + K * omap.v_res
    t0 = np.floor((corner - world.bounds_min) / world.v_res + 1e-9).astype(np.int64)
    t1 = np.ceil((corner + omap.v_res - world.bounds_min) / world.v_res - 1e-9).astype(np.int64)
    shape = np.array(world.shape)
    inside = np.all((t0 >= 0) & (t1 <= shape), axis=1)
    K, t0, t1 = K[inside], t0[inside], t1[inside]
    # summed-volume table counts truth-occupied cells in each footprint
    sat = np.zeros(tuple(shape + 1), np.int64)
    sat[1:, 1:, 1:] = world.occ.astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
    n_occ = np.zeros(len(K), np.int64)
    for corner_bits in range(8):
        pick = [(t1 if (corner_bits >> i) & 1 else t0)[:, i] for i in range(3)]
        sign = (-1) ** (3 - bin(corner_bits).count("1"))
        n_occ += sign * sat[pick[0], pick[1], pick[2]]
    center = np.floor((omap.centers_of(K) - world.bounds_min) / world.v_res).astype(np.int64)
    sel = (n_occ == 0) & reach[tuple(center.T)]
    K = K[sel]
    if len(K) == 0:
        return 0.0
    p = omap.window(lo, hi)[tuple((K - lo).T)]
    mapped_free = (p != 0.0) & (p < omap.prior)
    return float(np.count_nonzero(mapped_free)) / len(K)
