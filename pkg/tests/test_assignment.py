import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carss.assignment import (
    Assignment,
    assign_exact,
    assign_heuristic,
    candidate_lists,
    endpoint_costs,
)
from carss.exceptions import InfeasibleError, TooLargeError
from carss.tsp import Instance, generate_instances


def random_state(rng, n, K, n_visited):
    """Endpoints and visited set built from K random disjoint paths."""
    perm = rng.permutation(n)
    visited = perm[:n_visited]
    groups = np.array_split(visited, K)
    endpoints = [(int(g[0]), int(g[-1])) for g in groups]
    return endpoints, visited


def check_feasible(a: Assignment, n, visited, K):
    x = a.x
    unvisited = np.setdiff1d(np.arange(n), visited)
    assert (x[unvisited].sum(axis=1) == 1).all()
    assert (x[np.asarray(visited)].sum(axis=1) == 0).all()
    assert (x.sum(axis=0) >= 1).all()
    assert a.objective == pytest.approx(np.nansum(a.cost), abs=1e-12)
    assert x.shape == (n, K)


def test_one_dimensional_symmetry():
    inst = Instance([[0, 0], [1, 0], [0.1, 0], [0.9, 0]])
    a = assign_heuristic(inst, [(0, 0), (1, 1)], [0, 1])
    assert a.agent_of[2] == 0 and a.agent_of[3] == 1


def test_equidistant_tie_rule_deterministic():
    # agents at (0,0) and (2,0); unvisited vertices all on x = 1
    inst = Instance([[0, 0], [2, 0], [1, 1], [1, -1], [1, 2], [1, -2]])
    first = assign_heuristic(inst, [(0, 0), (1, 1)], [0, 1])
    second = assign_heuristic(inst, [(0, 0), (1, 1)], [0, 1])
    assert first.agent_of.tolist() == second.agent_of.tolist()
    # agent 0 takes vertex 2 (lowest index among its nearest), agent 1 takes 3,
    # the rest go to agent 0 on ties
    assert first.agent_of.tolist() == [-1, -1, 0, 1, 0, 0]


def test_forced_optimum():
    inst = Instance([[0, 0], [10, 0], [0.5, 0], [10.5, 0]])
    a = assign_exact(inst, [(0, 0), (1, 1)], [0, 1])
    assert a.agent_of.tolist() == [-1, -1, 0, 1]
    assert a.objective == pytest.approx(1.0)


def test_exact_small_enumeration():
    inst = generate_instances(6, 1, 3)[0]
    a = assign_exact(inst, [(0, 0), (1, 1)], [0, 1])
    # independent oracle: plain loop over the 2^4 labelings
    U = [2, 3, 4, 5]
    cost = endpoint_costs(inst, [(0, 0), (1, 1)], U)
    best = min(
        sum(cost[i, lab[i]] for i in range(4))
        for code in range(16)
        for lab in [[(code >> (3 - i)) & 1 for i in range(4)]]
        if len(set(lab)) == 2
    )
    assert a.objective == pytest.approx(best, abs=1e-12)


def test_infeasible_and_too_large():
    inst = generate_instances(10, 1, 0)[0]
    with pytest.raises(InfeasibleError):
        assign_heuristic(inst, [(0, 0), (1, 1), (2, 2)], list(range(8)))
    big = generate_instances(20, 1, 0)[0]
    with pytest.raises(TooLargeError):
        assign_exact(big, [(0, 0), (1, 1)], [0, 1])


def test_visited_mask_equals_index_list():
    inst = generate_instances(12, 1, 4)[0]
    mask = np.zeros(12, dtype=bool)
    mask[[0, 5, 7]] = True
    a = assign_heuristic(inst, [(0, 5), (7, 7)], mask)
    b = assign_heuristic(inst, [(0, 5), (7, 7)], [0, 5, 7])
    assert a.agent_of.tolist() == b.agent_of.tolist()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(6, 12), st.integers(2, 3))
def test_heuristic_vs_exact(seed, m_plus, K):
    rng = np.random.default_rng(seed)
    n = m_plus + K
    inst = generate_instances(n, 1, seed)[0]
    endpoints, visited = random_state(rng, n, K, K + int(rng.integers(0, n - 2 * K + 1)))
    h = assign_heuristic(inst, endpoints, visited)
    e = assign_exact(inst, endpoints, visited)
    check_feasible(h, n, visited, K)
    check_feasible(e, n, visited, K)
    assert h.objective >= e.objective - 1e-12


def test_candidate_lists_examples():
    inst = Instance([[0, 0], [5, 5], [0.1, 0], [0.2, 0], [0.3, 0], [0.4, 0], [0.5, 0], [5, 5.1]])
    a = assign_heuristic(inst, [(0, 0), (1, 1)], [0, 1])
    assert a.members(0).tolist() == [2, 3, 4, 5, 6]
    lists = candidate_lists(a, 3)
    assert lists[0].tolist() == [2, 3, 4]
    assert lists[1].tolist() == [7]
    for lst in lists:
        d = a.cost[lst]
        assert (np.diff(d) >= 0).all()
    assert not set(lists[0]) & set(lists[1])


def test_to_rows():
    inst = Instance([[0, 0], [1, 0], [0.1, 0], [0.9, 0]])
    a = assign_heuristic(inst, [(0, 0), (1, 1)], [0, 1])
    rows = a.to_rows()
    assert [(v, k) for v, k, _ in rows] == [(2, 0), (3, 1)]
    assert rows[0][2] == pytest.approx(0.1)
