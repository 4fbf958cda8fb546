import logging

import numpy as np
import pytest
from oracles import brute_traversable, grid_map, random_problem, run_optimality

from rapidex.global_planner import (
    Path,
    PlanRequest,
    StartNotTraversable,
    compute_homing_path,
    plan,
    replan_needed,
)
from rapidex.voxel_map import UpdateDigest

FREE, OCC = 0.3, 0.8


def corridor_states(n=10):
    s = np.full((n, 3, 3), 2)
    s[:, 1, 1] = 1
    return s


def test_straight_corridor():
    m = grid_map(corridor_states(), v_res=0.5)
    p = plan(m, PlanRequest(tuple(m.center_of((0, 1, 1))), (9, 1, 1), margin=0))
    assert len(p) == 10
    assert p.cost == pytest.approx(9 * 0.5, abs=1e-12)
    assert p.keys == [(i, 1, 1) for i in range(10)]


def test_walled_off_goal():
    s = np.ones((9, 5, 5), int)
    s[4, :, :] = 2
    m = grid_map(s, 1.0)
    assert plan(m, PlanRequest(tuple(m.center_of((1, 2, 2))), (7, 2, 2), margin=0)) is None


def test_start_not_traversable():
    s = np.ones((6, 6, 6), int)
    s[3, 3, 3] = 2
    m = grid_map(s, 1.0)
    with pytest.raises(StartNotTraversable):
        plan(m, PlanRequest(tuple(m.center_of((2, 3, 3))), (0, 0, 0), margin=1))
    with pytest.raises(StartNotTraversable):
        plan(m, PlanRequest(tuple(m.center_of((3, 3, 3))), (0, 0, 0), margin=1), allow_unsafe_start=True)
    p = plan(m, PlanRequest(tuple(m.center_of((2, 3, 3))), (0, 0, 0), margin=1), allow_unsafe_start=True)
    assert p is not None and p.keys[0] == (2, 3, 3)


def test_goal_may_be_unknown_but_not_occupied():
    s = np.ones((6, 3, 3), int)
    s[5, 1, 1] = 0
    m = grid_map(s, 1.0)
    p = plan(m, PlanRequest(tuple(m.center_of((0, 1, 1))), (5, 1, 1), margin=0))
    assert p.keys[-1] == (5, 1, 1)
    # unknown interior is not entered: a goal two cells into unknown is unreachable
    assert plan(m, PlanRequest(tuple(m.center_of((0, 1, 1))), (7, 1, 1), margin=0)) is None
    s[5, 1, 1] = 2
    m = grid_map(s, 1.0)
    assert plan(m, PlanRequest(tuple(m.center_of((0, 1, 1))), (5, 1, 1), margin=0)) is None


def test_optimality_against_dijkstra():
    assert run_optimality(20, 5) > 0


def test_margin_monotone():
    rng = np.random.default_rng(8)
    for _ in range(15):
        s, start, goal, _ = random_problem(rng, 14, margin=2)
        m = grid_map(s, 1.0)
        costs = []
        for margin in (0, 1, 2):
            p = plan(m, PlanRequest(tuple(m.center_of(start)), tuple(goal.tolist()), margin),
                     allow_unsafe_start=True)
            costs.append(None if p is None else p.cost)
        for a, b in zip(costs, costs[1:]):
            if a is not None and b is not None:
                assert b >= a - 1e-12


def test_plan_is_pure():
    rng = np.random.default_rng(2)
    s, start, goal, margin = random_problem(rng)
    m = grid_map(s, 0.5)
    before = m.dumps()
    req = PlanRequest(tuple(m.center_of(start)), tuple(goal.tolist()), margin)
    a, b = plan(m, req), plan(m, req)
    assert m.dumps() == before
    if a is not None:
        assert a.keys == b.keys and a.cost == b.cost


def test_homing_examples(caplog):
    s = np.ones((8, 8, 8), int)
    m = grid_map(s, 1.0)
    here = m.center_of((3, 3, 3))
    p = compute_homing_path(m, here, here, margin=1)
    assert len(p) == 1 and p.cost == 0.0
    s[5, :, :] = 2
    m = grid_map(s, 1.0)
    with caplog.at_level(logging.WARNING):
        assert compute_homing_path(m, m.center_of((1, 3, 3)), m.center_of((7, 3, 3)), margin=1) is None
    assert "unreachable" in caplog.text


def test_path_dump():
    p = Path(np.array([[0.25, 0.25, 0.25], [0.75, 0.25, 0.25]]), [(0, 0, 0), (1, 0, 0)], 0.5)
    assert p.dumps() == "path v1 2\n0.250000 0.250000 0.250000\n0.750000 0.250000 0.250000\n"


# -- replan trigger ------------------------------------------------------------------------------


def brute_replan(states_after, remaining, changed, margin):
    if not changed or not remaining:
        return False
    for w in remaining:
        for c in changed:
            if max(abs(a - b) for a, b in zip(w, c)) <= margin:
                return True
    trav = brute_traversable(states_after, margin)
    return any(not trav[w] for w in remaining[:-1])


def test_replan_examples():
    s = np.ones((10, 5, 5), int)
    m = grid_map(s, 1.0)
    path = plan(m, PlanRequest(tuple(m.center_of((1, 2, 2))), (8, 2, 2), margin=1))
    assert not replan_needed(m, path.keys, UpdateDigest(m.map_id, m.version + 1), 1)
    m.set_probability((4, 2, 2), OCC)
    d = UpdateDigest(m.map_id, m.version + 1, np.array([[4, 2, 2]]), np.array([[4, 2, 2]]))
    assert replan_needed(m, path.keys, d, 1)


def test_replan_matches_recheck():
    rng = np.random.default_rng(4)
    n = 12
    for _ in range(60):
        margin = int(rng.integers(0, 3))
        s, start, goal, _ = random_problem(rng, n, margin)
        m = grid_map(s, 1.0)
        p = plan(m, PlanRequest(tuple(m.center_of(start)), tuple(goal.tolist()), margin))
        if p is None:
            continue
        after = s.copy()
        ch = rng.integers(0, n, (int(rng.integers(0, 4)), 3))
        changed = []
        for k in ch.tolist():
            new = int(rng.integers(0, 3))
            if new != after[tuple(k)]:
                after[tuple(k)] = new
                changed.append(tuple(k))
        m2 = grid_map(after, 1.0)
        cut = int(rng.integers(0, len(p.keys)))
        remaining = p.keys[cut:]
        arr = np.array(changed, np.int64).reshape(-1, 3)
        got = replan_needed(m2, remaining, UpdateDigest(m2.map_id, 1, arr, arr), margin)
        assert got == brute_replan(after, remaining, changed, margin)
