"""Vertex-to-agent assignment used to restrict each agent's action set.

Every unvisited vertex goes to exactly one agent, every agent receives at
least one vertex, and the cost of putting vertex ``i`` on agent ``k`` is its
distance to the nearer end of that agent's path. The heuristic is greedy; the
exact solver enumerates all assignments and exists for testing.

Ties are broken toward the smallest vertex index, then the smallest agent
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleError, InvalidInputError, TooLargeError
from .tsp import Instance

#: Largest number of unvisited vertices ``assign_exact`` accepts.
EXACT_MAX_VERTICES = 12
#: Largest number of candidate assignments ``assign_exact`` will enumerate.
EXACT_MAX_ENUMERATION = 1 << 24


@dataclass(frozen=True, eq=False)
class Assignment:
    """Result of a vertex-agent assignment.

    Attributes
    ----------
    agent_of : (n,) int array
        Agent owning each vertex, ``-1`` for visited vertices.
    cost : (n,) float array
        ``min(d(i, front_k), d(i, rear_k))`` for the owning agent, ``nan`` if visited.
    n_agents : int
    objective : float
        Sum of ``cost`` over assigned vertices.
    """

    agent_of: np.ndarray
    cost: np.ndarray
    n_agents: int
    objective: float

    @property
    def x(self) -> np.ndarray:
        """Binary ``n x K`` assignment matrix."""
        x = np.zeros((len(self.agent_of), self.n_agents), dtype=np.int8)
        rows = np.flatnonzero(self.agent_of >= 0)
        x[rows, self.agent_of[rows]] = 1
        return x

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.agent_of == k)

    def to_rows(self):
        """``(vertex, agent, distance)`` rows for assigned vertices, by vertex index."""
        rows = np.flatnonzero(self.agent_of >= 0)
        return [(int(i), int(self.agent_of[i]), float(self.cost[i])) for i in rows]


def endpoint_costs(inst: Instance, endpoints, vertices) -> np.ndarray:
    """``(len(vertices), K)`` matrix of distances to each agent's nearer endpoint."""
    ends = np.asarray(endpoints, dtype=np.int64).reshape(-1, 2)
    pts = inst.coords[np.asarray(vertices, dtype=np.int64)]
    df = pts[:, None, :] - inst.coords[ends[:, 0]][None, :, :]
    dr = pts[:, None, :] - inst.coords[ends[:, 1]][None, :, :]
    return np.minimum(np.sqrt((df * df).sum(-1)), np.sqrt((dr * dr).sum(-1)))


def _unvisited(n, visited):
    mask = np.zeros(n, dtype=bool)
    v = np.asarray(visited)
    if v.dtype == bool:
        if len(v) != n:
            raise InvalidInputError("visited mask has the wrong length")
        mask = v.copy()
    else:
        mask[v.astype(np.int64)] = True
    return np.flatnonzero(~mask)


def _check(endpoints, n_unvisited):
    K = len(endpoints)
    if K < 1:
        raise InvalidInputError("need at least one agent")
    if n_unvisited < K:
        raise InfeasibleError(
            f"{n_unvisited} unvisited vertices cannot cover {K} agents"
        )
    return K


def assign_heuristic(inst: Instance, endpoints, visited) -> Assignment:
    """Greedy assignment.

    Agents in index order each take their nearest unassigned vertex; every
    vertex still unassigned afterwards (ascending index) goes to its nearest
    agent.

    Parameters
    ----------
    endpoints : sequence of (front, rear) vertex pairs, one per agent
    visited : boolean mask of length n, or an iterable of visited vertex indices
    """
    U = _unvisited(inst.n, visited)
    K = _check(endpoints, len(U))
    cost = endpoint_costs(inst, endpoints, U)
    owner = np.full(len(U), -1, dtype=np.int64)
    free = np.ones(len(U), dtype=bool)
    for k in range(K):
        col = np.where(free, cost[:, k], np.inf)
        j = int(np.argmin(col))
        owner[j] = k
        free[j] = False
    rest = np.flatnonzero(free)
    owner[rest] = np.argmin(cost[rest], axis=1)
    return _build(inst.n, U, owner, cost, K)


def _build(n, U, owner, cost, K):
    agent_of = np.full(n, -1, dtype=np.int64)
    agent_of[U] = owner
    c = np.full(n, np.nan)
    c[U] = cost[np.arange(len(U)), owner]
    agent_of.setflags(write=False)
    c.setflags(write=False)
    return Assignment(agent_of, c, K, float(c[U].sum()))


def assign_exact(inst: Instance, endpoints, visited) -> Assignment:
    """Optimal assignment by exhaustive enumeration of all ``K**m`` labelings."""
    U = _unvisited(inst.n, visited)
    m = len(U)
    K = _check(endpoints, m)
    if m > EXACT_MAX_VERTICES or K**m > EXACT_MAX_ENUMERATION:
        raise TooLargeError(
            f"exact assignment limited to {EXACT_MAX_VERTICES} unvisited vertices "
            f"and {EXACT_MAX_ENUMERATION} labelings (got m={m}, K={K})"
        )
    cost = endpoint_costs(inst, endpoints, U)
    best_val, best_lab = np.inf, None
    total = K**m
    chunk = 1 << 16
    weights = K ** np.arange(m - 1, -1, -1, dtype=np.int64)
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        labels = (codes[:, None] // weights[None, :]) % K
        covered = np.zeros((len(codes), K), dtype=bool)
        rows = np.repeat(np.arange(len(codes)), m)
        covered[rows, labels.ravel()] = True
        ok = covered.all(axis=1)
        if not ok.any():
            continue
        vals = cost[np.arange(m)[None, :], labels].sum(axis=1)
        vals = np.where(ok, vals, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_lab = vals[j], labels[j]
    return _build(inst.n, U, best_lab, cost, K)


def candidate_lists(a: Assignment, cap: int) -> list[np.ndarray]:
    """Each agent's vertices sorted by distance (ties by index), truncated to ``cap``."""
    if cap < 1:
        raise InvalidInputError("cap must be >= 1")
    out = []
    for k in range(a.n_agents):
        mem = a.members(k)
        order = np.argsort(a.cost[mem], kind="stable")
        out.append(mem[order][:cap])
    return out
