"""Two-phase cooperative game that builds a tour from agent subpaths.

Generation: ``K`` agents start on distinct vertices and, for ``T'`` steps,
each attach one unvisited vertex to the nearer end of their own path.
Vertices left over become isolated (zero-length) subpaths.

Merging: the ``K + |I|`` subpaths are joined into a single chain by a
single agent, starting from a chosen endpoint ``q_start``. The chain is then
closed into a Hamiltonian cycle.

Merge-graph index layout (``m = K + |I|``)::

    [front_1 .. front_K, iso_1 .. iso_|I|, rear_1 .. rear_K, iso_1 .. iso_|I|]

so that the partner (other end of the same subpath) of index ``i`` is
``i +/- m``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .assignment import Assignment, assign_heuristic, candidate_lists
from .exceptions import (
    InvalidActionError,
    InvalidConfigError,
    InvalidInputError,
    NotTerminalError,
)
from .tsp import Instance, Tour

GENERATION = "generation"
MERGING = "merging"
TERMINAL = "terminal"
FRONT = "front"
REAR = "rear"


def t_prime(n: int, K: int) -> int:
    """Number of generation steps after the start vertices are placed."""
    if K < 2 or 2 * K > n:
        raise InvalidConfigError(f"need 2 <= K <= n/2, got n={n}, K={K}")
    if n % K == 0:
        return n // K - 2
    return n // K - 1


def action_cap(n: int, K: int) -> int:
    """Per-agent candidate limit (and policy slot count)."""
    return -(-n // K)


class GenAction(NamedTuple):
    agent: int
    vertex: int
    side: str


class MergeAction(NamedTuple):
    p: int
    q: int


class AgentPath:
    """Ordered vertex sequence owned by one agent."""

    __slots__ = ("vertices",)

    def __init__(self, start):
        self.vertices = deque([int(start)])

    @property
    def front(self) -> int:
        return self.vertices[0]

    @property
    def rear(self) -> int:
        return self.vertices[-1]

    def attach(self, vertex, side):
        if side == FRONT:
            self.vertices.appendleft(int(vertex))
        else:
            self.vertices.append(int(vertex))

    def edges(self):
        v = list(self.vertices)
        return list(zip(v[:-1], v[1:]))

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"AgentPath({list(self.vertices)})"


@dataclass(eq=False)
class GameState:
    """Generation-phase state. Mutated in place by :func:`step_generation`."""

    inst: Instance
    K: int
    paths: list
    visited: np.ndarray
    t: int = 0
    phase: str = GENERATION
    t_prime: int = 0
    isolated: list = field(default_factory=list)
    starts: tuple = ()
    history: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.inst.n

    @property
    def endpoints(self):
        return [(p.front, p.rear) for p in self.paths]

    def unvisited(self) -> np.ndarray:
        return np.flatnonzero(~self.visited)


def init_state(inst: Instance, K: int, starts) -> GameState:
    tp = t_prime(inst.n, K)
    starts = [int(v) for v in starts]
    if len(starts) != K:
        raise InvalidInputError(f"need {K} start vertices, got {len(starts)}")
    if len(set(starts)) != K:
        raise InvalidInputError(f"start vertices must be distinct, got {starts}")
    if min(starts) < 0 or max(starts) >= inst.n:
        raise InvalidInputError("start vertex out of range")
    visited = np.zeros(inst.n, dtype=bool)
    visited[starts] = True
    s = GameState(inst, K, [AgentPath(v) for v in starts], visited,
                  t_prime=tp, starts=tuple(starts))
    if tp == 0:
        _switch_to_merging(s)
    return s


def _switch_to_merging(s: GameState):
    s.phase = MERGING
    s.isolated = s.unvisited().tolist()


def assign(s: GameState) -> Assignment:
    return assign_heuristic(s.inst, s.endpoints, s.visited)


def nearer_side(inst: Instance, path: AgentPath, vertex: int) -> str:
    """Endpoint a vertex attaches to; the front wins ties."""
    df = inst.dist(vertex, path.front)
    dr = inst.dist(vertex, path.rear)
    return FRONT if df <= dr else REAR


def feasible_gen_actions(s: GameState, a: Assignment | None = None, cap: int | None = None):
    """Per-agent lists of feasible :class:`GenAction`, nearest candidates first."""
    if s.phase != GENERATION:
        raise InvalidActionError(f"no generation actions in phase {s.phase!r}")
    if a is None:
        a = assign(s)
    if cap is None:
        cap = action_cap(s.n, s.K)
    out = []
    for k, cands in enumerate(candidate_lists(a, cap)):
        if len(cands) == 0:
            raise AssertionError(f"agent {k} has no candidate vertices")
        path = s.paths[k]
        out.append([GenAction(k, int(v), nearer_side(s.inst, path, int(v))) for v in cands])
    return out


def step_generation(s: GameState, actions) -> GameState:
    """Apply one joint action (one :class:`GenAction` per agent) in place."""
    if s.phase != GENERATION:
        raise InvalidActionError(f"cannot extend paths in phase {s.phase!r}")
    actions = sorted(actions, key=lambda a: a.agent)
    if [a.agent for a in actions] != list(range(s.K)):
        raise InvalidActionError("need exactly one action per agent")
    verts = [int(a.vertex) for a in actions]
    if len(set(verts)) != len(verts):
        raise InvalidActionError(f"agents chose overlapping vertices {verts}")
    for a in actions:
        if not 0 <= a.vertex < s.n or s.visited[a.vertex]:
            raise InvalidActionError(f"vertex {a.vertex} is not an unvisited vertex")
        if a.side not in (FRONT, REAR):
            raise InvalidActionError(f"bad attach side {a.side!r}")
    for a in actions:
        s.paths[a.agent].attach(a.vertex, a.side)
        s.visited[a.vertex] = True
    s.history.append(tuple(actions))
    s.t += 1
    if s.t == s.t_prime:
        _switch_to_merging(s)
    return s


@dataclass(frozen=True, eq=False)
class MergeGraph:
    """Reduced graph over subpath endpoints; same-subpath edges are forbidden."""

    endpoint_orig: np.ndarray
    n_paths: int
    n_agents: int

    @property
    def size(self) -> int:
        return 2 * self.n_paths

    @property
    def n_isolated(self) -> int:
        return self.n_paths - self.n_agents

    def partner(self, i):
        return (i + self.n_paths) % self.size

    def subpath_of(self, i: int) -> int:
        return i % self.n_paths

    @property
    def forbidden(self):
        return {frozenset((i, i + self.n_paths)) for i in range(self.n_paths)}

    def allowed(self, i: int, j: int) -> bool:
        return i != j and self.partner(i) != j

    def features(self, inst: Instance) -> np.ndarray:
        """``(size, 4)`` endpoint inputs: own coordinate then partner's coordinate."""
        own = inst.coords[self.endpoint_orig]
        other = inst.coords[self.endpoint_orig[self.partner(np.arange(self.size))]]
        return np.concatenate([own, other], axis=1)


def build_merge_graph(s: GameState) -> MergeGraph:
    if s.phase != MERGING:
        raise InvalidActionError("merge graph needs a state at the end of generation")
    fronts = [p.front for p in s.paths]
    rears = [p.rear for p in s.paths]
    iso = list(s.isolated)
    orig = np.array(fronts + iso + rears + iso, dtype=np.int64)
    orig.setflags(write=False)
    return MergeGraph(orig, s.K + len(iso), s.K)


class MergeState:
    """Progress of one merging rollout from a fixed start endpoint.

    Several merge states may share one finished generation state; they never
    modify it.
    """

    def __init__(self, gen: GameState, graph: MergeGraph, q_start: int):
        if gen.phase != MERGING:
            raise InvalidActionError("generation phase has not finished")
        if not 0 <= q_start < graph.size:
            raise InvalidInputError(f"merge start {q_start} outside 0..{graph.size - 1}")
        self.gen = gen
        self.graph = graph
        self.q_start = int(q_start)
        self.q_prev = int(q_start)
        self.edges: list[MergeAction] = []
        self.consumed = {int(q_start)}
        self.phase = MERGING
        self.reward = 0.0
        size = graph.size
        self._parent = list(range(size))
        self._ends = {}
        for i in range(graph.n_paths):
            j = i + graph.n_paths
            self._parent[j] = i
            self._ends[i] = (i, j)
        self._components = graph.n_paths

    def _find(self, i):
        root = i
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[i] != root:
            self._parent[i], i = root, self._parent[i]
        return root

    def component(self, i) -> set:
        r = self._find(i)
        return {j for j in range(self.graph.size) if self._find(j) == r}

    def other_end(self, i: int) -> int:
        a, b = self._ends[self._find(i)]
        return b if a == i else a

    @property
    def p(self) -> int:
        """Free end of the growing chain opposite ``q_start``."""
        return self.other_end(self.q_start)

    @property
    def steps_done(self) -> int:
        return len(self.edges)

    @property
    def is_final_step(self) -> bool:
        return self._components == 1 and self.phase == MERGING

    def feasible_mask(self) -> np.ndarray:
        r = self._find(self.q_start)
        return np.array([self._find(j) != r for j in range(self.graph.size)])

    def _union(self, p, q):
        rp, rq = self._find(p), self._find(q)
        ends = (self.other_end(p), self.other_end(q))
        self._parent[rq] = rp
        del self._ends[rq]
        self._ends[rp] = ends
        self._components -= 1


def start_merging(s: GameState, g: MergeGraph, q_start: int) -> MergeState:
    return MergeState(s, g, q_start)


def feasible_merge_actions(ms: MergeState) -> list[MergeAction]:
    """Edges from the chain's free end to every endpoint of another subpath.

    At the final step the only action is the closing edge back to ``q_start``.
    """
    if ms.phase != MERGING:
        return []
    p = ms.p
    if ms.is_final_step:
        return [MergeAction(p, ms.q_start)]
    return [MergeAction(p, int(q)) for q in np.flatnonzero(ms.feasible_mask())]


def step_merging(ms: MergeState, action) -> MergeState:
    if ms.phase != MERGING:
        raise InvalidActionError("merging already finished")
    p, q = int(action[0]), int(action[1])
    if p != ms.p:
        raise InvalidActionError(f"edge must leave the chain end {ms.p}, got {p}")
    if ms.is_final_step:
        if q != ms.q_start:
            raise InvalidActionError("final edge must close the cycle at q_start")
        ms.edges.append(MergeAction(p, q))
        ms.phase = TERMINAL
        ms.reward = -extract_tour(ms).length
        return ms
    if not 0 <= q < ms.graph.size or not ms.feasible_mask()[q]:
        raise InvalidActionError(f"endpoint {q} is consumed or on the current chain")
    ms._union(p, q)
    ms.edges.append(MergeAction(p, q))
    ms.consumed.update((p, q))
    ms.q_prev = q
    ms.reward = 0.0
    return ms


def close_tour(ms: MergeState) -> MergeState:
    if not ms.is_final_step:
        raise InvalidActionError("subpaths are not all joined yet")
    return step_merging(ms, MergeAction(ms.p, ms.q_start))


def shifted_partner(graph: MergeGraph, q_prev: int) -> int:
    """Index shift rule for the chain end: add ``m`` to fronts, subtract from rears."""
    m = graph.n_paths
    return q_prev + m if q_prev < m else q_prev - m


def tour_edges(ms: MergeState) -> list[tuple[int, int]]:
    """All edges of the final cycle in original-vertex indices."""
    edges = []
    for path in ms.gen.paths:
        edges.extend(path.edges())
    orig = ms.graph.endpoint_orig
    edges.extend((int(orig[a.p]), int(orig[a.q])) for a in ms.edges)
    return edges


def extract_tour(ms: MergeState) -> Tour:
    if ms.phase != TERMINAL:
        raise NotTerminalError("tour is only available after the closing edge")
    inst = ms.gen.inst
    n = inst.n
    adj = [[] for _ in range(n)]
    edges = tour_edges(ms)
    if len(edges) != n:
        raise AssertionError(f"cycle has {len(edges)} edges, expected {n}")
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    if any(len(a) != 2 for a in adj):
        raise AssertionError("merged edges do not form a cycle")
    order = [0]
    prev, cur = -1, 0
    for _ in range(n - 1):
        a, b = adj[cur]
        nxt = a if a != prev else b
        prev, cur = cur, nxt
        order.append(cur)
    if len(set(order)) != n:
        raise AssertionError("merged edges form more than one cycle")
    return Tour.from_order(inst, order)


def terminal_reward(ms: MergeState) -> float:
    if ms.phase != TERMINAL:
        raise NotTerminalError("reward is only defined on the terminal transition")
    return -extract_tour(ms).length


def random_starts(n: int, K: int, rng: np.random.Generator) -> list[int]:
    return [int(v) for v in rng.choice(n, size=K, replace=False)]


def random_rollout(inst: Instance, K: int, rng: np.random.Generator, q_start=None):
    """Uniform-random policy rollout; returns ``(gen_state, merge_graph, merge_state)``."""
    s = init_state(inst, K, random_starts(inst.n, K, rng))
    while s.phase == GENERATION:
        acts = feasible_gen_actions(s)
        s = step_generation(s, [lst[rng.integers(len(lst))] for lst in acts])
    g = build_merge_graph(s)
    if q_start is None:
        q_start = int(rng.integers(g.size))
    ms = start_merging(s, g, q_start)
    while ms.phase == MERGING:
        acts = feasible_merge_actions(ms)
        ms = step_merging(ms, acts[rng.integers(len(acts))])
    return s, g, ms


def isolated_count(n: int, K: int) -> int:
    return n - K * (t_prime(n, K) + 1)


def merge_graph_size(n: int, K: int) -> int:
    return 2 * (K + isolated_count(n, K))


def expected_feasible_merge_count(graph: MergeGraph, steps_done: int) -> int:
    return graph.size - 2 * (steps_done + 1)

