"""End-to-end acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line and a summary of all
verdicts is appended to the pytest terminal report.
"""

import math
import random
import time

import numpy as np
import pytest
from oracles import (
    grid_map,
    oracle_cost,
    random_case,
    random_problem,
    random_weights,
    random_world,
    run_invariance,
    select_oracle,
    shift_oracle,
)

from rapidex.frontier_gen import FrontierBook, FrontierParams, full_rescan
from rapidex.frontier_select import MavState, Mode, select_nbf
from rapidex.global_planner import PlanRequest, is_traversable, plan
from rapidex.mission import LOG_COLUMNS, MissionConfig, coverage_report, run_mission
from rapidex.sim_env import LidarSpec, WorldModel, simulate_scan
from rapidex.voxel_map import OccupancyMap, UpdateDigest, update_occupancy

pytestmark = pytest.mark.acceptance

CAVE_SEEDS = (1, 2, 3, 4, 5)
CAVE_DURATION = 300.0
TREND_SEED = 1


def _logit(p):
    return math.log(p / (1.0 - p))


# -- 1. occupancy update ---------------------------------------------------------------------


def test_criterion_01_occupancy_oracle(criteria):
    rnd = random.Random(1)
    worst_sum = worst_perm = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        n = rnd.randint(1, 50)
        # |logit(z)| < 0.62 keeps 50 steps inside binary64's open interval (0, 1)
        seq = [rnd.uniform(0.35, 0.65) for _ in range(n)]
        prior = 0.5
        p = prior
        for z in seq:
            p = update_occupancy(p, z, prior)
        closed = 1.0 / (1.0 + math.exp(-(_logit(prior) + sum(_logit(z) - _logit(prior) for z in seq))))
        shuffled = seq[:]
        rnd.shuffle(shuffled)
        q = prior
        for z in shuffled:
            q = update_occupancy(q, z, prior)
        worst_sum = max(worst_sum, abs(p - closed))
        worst_perm = max(worst_perm, abs(p - q))
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-9 and worst_perm <= 1e-9 and elapsed < 1.0
    criteria.report(1, ok, f"max |rec-closed| {worst_sum:.2e}, max |perm| {worst_perm:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2. incremental frontier maintenance ------------------------------------------------------


def test_criterion_02_frontier_equivalence(criteria):
    rng = np.random.default_rng(2)
    params = FrontierParams(k=4, m=2, r=1.0, R=8.0)
    spec = LidarSpec(R=8.0, h_rays=72, v_rays=9, v_fov=math.pi / 2)
    checks = mismatches = 0
    t0 = time.perf_counter()
    for _ in range(100):
        occ = random_world(rng, 32)
        world = WorldModel(np.zeros(3), np.full(3, 32.0), 1.0, occ, start=np.full(3, 16.5))
        free = np.argwhere(~occ)
        book = FrontierBook(params)
        world_map = OccupancyMap(1.0)
        for _ in range(int(rng.integers(2, 6))):
            pos = world.center_of(free[rng.integers(len(free))]) + rng.uniform(-0.4, 0.4, 3)
            scan = simulate_scan(world, spec, MavState(pos, float(rng.uniform(-3, 3))))
            book.regenerate(world_map, world_map.integrate_scan(scan))
            F, SF, O = shift_oracle(world_map, params)
            checks += 1
            if (book.F, book.SF, book.O) != (F, SF, O) or full_rescan(world_map, params) != (F, SF):
                mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60.0
    criteria.report(2, ok, f"{checks} post-scan comparisons, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# -- 3. NBF selection -----------------------------------------------------------------------------


def _book_for(m, keys, params):
    for k in keys.tolist():
        m.set_probability(tuple(k), 0.3)
    cells = np.array(sorted(m.cells()), np.int64).reshape(-1, 3)
    m.version += 1
    return FrontierBook(params).regenerate(m, UpdateDigest(m.map_id, m.version, cells, cells))


def test_criterion_03_selection_oracle(criteria):
    rng = np.random.default_rng(3)
    params = FrontierParams(k=4, m=1, r=1.0, R=6.0)
    mismatches = nonempty = 0
    spent = 0.0
    for _ in range(1000):
        m, keys, s = random_case(rng)
        book = _book_for(m, keys, params)
        w = random_weights(rng)
        R = float(rng.uniform(1, 8))
        t0 = time.perf_counter()
        res = select_nbf(book, s, m, w, R)
        spent += time.perf_counter() - t0
        mode, best = select_oracle(m, book.safe_keys(), s, w, R)
        nonempty += best is not None
        if res.mode != mode or (best is not None and (res.cost, res.key) != best):
            mismatches += 1
    ok = mismatches == 0 and spent < 10.0 and nonempty > 500
    criteria.report(3, ok, f"1000 books ({nonempty} non-empty), {mismatches} mismatches, select_nbf {spent:.2f}s")
    assert ok


# -- 4. planner optimality -----------------------------------------------------------------------


def test_criterion_04_planner_optimality(criteria):
    rng = np.random.default_rng(4)
    worst = 0.0
    bad_wp = wrong_reach = reached = 0
    spent = 0.0
    for _ in range(50):
        s, start, goal, margin = random_problem(rng)
        m = grid_map(s, 0.5)
        t0 = time.perf_counter()
        p = plan(m, PlanRequest(tuple(m.center_of(start)), tuple(goal.tolist()), margin))
        spent += time.perf_counter() - t0
        ref = oracle_cost(s, start, goal, margin, 0.5)
        if not np.isfinite(ref) or p is None:
            wrong_reach += np.isfinite(ref) != (p is not None)
            continue
        reached += 1
        worst = max(worst, abs(p.cost - ref))
        bad_wp += sum(not is_traversable(m, k, margin) for k in p.keys[1:-1])
    ok = worst <= 1e-9 and bad_wp == 0 and wrong_reach == 0 and spent < 30.0
    criteria.report(
        4, ok,
        f"50 grids ({reached} reachable), max |cost-oracle| {worst:.1e}, "
        f"{bad_wp} unsafe waypoints, {wrong_reach} reachability errors, plan {spent:.2f}s",
    )
    assert ok


# -- 5. end-to-end safety ------------------------------------------------------------------------


def _monotone(result) -> bool:
    """Time strictly increasing, volume and distance non-decreasing."""
    return bool(
        np.all(np.diff(result.log.column("volume")) >= 0)
        and np.all(np.diff(result.log.column("distance")) >= 0)
        and np.all(np.diff(result.log.column("t")) > 0)
    )


def test_criterion_05_cave_safety(criteria, missions):
    lines, ok = [], True
    for seed in CAVE_SEEDS:
        r = missions(gen="branching_cave", seed=seed, duration=CAVE_DURATION, res=0.5, m=2)
        flags = sum(row[LOG_COLUMNS.index("collision")] for row in r.log.rows)
        good = r.collisions == 0 and flags == 0 and r.margin_violations == 0 and r.unsafe_waypoints == 0
        ok &= good
        lines.append(
            f"seed {seed}: collisions {r.collisions}, violations {r.margin_violations}, "
            f"min clearance {r.min_clearance:.3f} m"
        )
    criteria.report(5, ok, "; ".join(lines))
    assert ok


# -- 6. coverage ----------------------------------------------------------------------------------


def test_criterion_06_coverage(criteria, missions):
    lines, ok = [], True
    for kind in ("corridor", "loop"):
        t0 = time.perf_counter()
        r = missions(gen=kind, seed=0, duration=900.0)
        wall = time.perf_counter() - t0
        cov = coverage_report(r)
        good = cov >= 0.95 and r.completed and r.homing_ok and wall < 300 and r.collisions == 0
        ok &= good
        extent = r.world.bounds_max - r.world.bounds_min
        lines.append(
            f"{kind} ({extent[0]:.0f}x{extent[1]:.0f}x{extent[2]:.0f} m): coverage {cov:.3f}, "
            f"mode {r.log.final_mode}, homing {r.homing_ok}, {wall:.0f}s"
        )
    criteria.report(6, ok, "; ".join(lines))
    assert ok


# -- 7. monotonicity and duration trend ---------------------------------------------------------


def test_criterion_07_monotone_trend(criteria, missions):
    volumes = []
    for d in (100.0, 300.0, 600.0):
        r = missions(gen="branching_cave", seed=TREND_SEED, duration=d, res=0.5, m=2)
        volumes.append(r.log.rows[-1][LOG_COLUMNS.index("volume")])
    increasing = all(b > a for a, b in zip(volumes, volumes[1:]))
    # every mission flown so far in this session, including criteria 5 and 6
    flown = list(missions.cache.values())
    mono = all(_monotone(r) for r in flown)
    ok = increasing and mono
    vol = " < ".join(f"{v:.1f}" for v in volumes)
    criteria.report(7, ok, f"{len(flown)} missions monotone: {mono}; volume at 100/300/600 s: {vol} m3")
    assert ok


# -- 8. resolution trade-off ------------------------------------------------------------------


def test_criterion_08_resolution_tradeoff(criteria, missions):
    med = {}
    for res in (0.3, 0.7):
        # one shared truth grid (0.1 m) so both resolutions fly the same world
        r = missions(gen="loop", seed=0, duration=60.0, res=res, truth_res=0.1, gen_params={"radius": 3.0})
        med[res] = float(np.median([c for _, c in r.log.cpu]))
    ok = med[0.7] < med[0.3]
    criteria.report(8, ok, f"median CPU per tick: v_res 0.3 -> {med[0.3] * 1e3:.2f} ms, 0.7 -> {med[0.7] * 1e3:.2f} ms")
    assert ok


# -- 9. determinism -------------------------------------------------------------------------------


def test_criterion_09_determinism(criteria, tmp_path):
    configs = [
        MissionConfig(gen="corridor", seed=0, duration=40.0),
        MissionConfig(gen="branching_cave", seed=2, duration=30.0),
        MissionConfig(gen="loop", seed=3, duration=30.0, lidar_noise=0.02),
    ]
    same = True
    for i, cfg in enumerate(configs):
        for run in ("a", "b"):
            run_mission(cfg).write(tmp_path / f"{i}{run}")
        for name in ("mission.csv", "trajectory.csv", "map.voxmap"):
            same &= (tmp_path / f"{i}a" / name).read_bytes() == (tmp_path / f"{i}b" / name).read_bytes()
    criteria.report(9, same, f"{len(configs)} configs flown twice, outputs bit-identical: {same}")
    assert same


# -- 10. argmin invariance ------------------------------------------------------------------------


def test_criterion_10_argmin_invariance(criteria):
    t0 = time.perf_counter()
    failures = []
    for mode, seed in ((Mode.LOCAL, 10), (Mode.GLOBAL, 11)):
        try:
            run_invariance(10_000, mode, seed)
        except AssertionError as exc:
            failures.append(f"{mode.value}: {exc}")
    ok = not failures
    detail = f"10000 local + 10000 global cases, {time.perf_counter() - t0:.0f}s"
    criteria.report(10, ok, detail + ("" if ok else f"; failures {failures}"))
    assert ok
