"""Classical TSP solvers: insertion, nearest neighbor, 2-opt and exact oracles."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, TooLargeError
from .tsp import Instance, Tour, check_permutation

HELD_KARP_MAX = 18
BRUTE_FORCE_MAX = 10
INSERTION_RULES = ("nearest", "farthest", "random")


@dataclass(frozen=True)
class BaselineResult:
    tour: Tour
    algo: str
    wall_ms: float


def _matrix(inst: Instance) -> np.ndarray:
    return inst.distance_matrix()


def insertion(inst: Instance, rule: str = "farthest", seed=0) -> Tour:
    """Insertion construction with cheapest-position placement.

    Seed sub-tour: the two mutually farthest points (``farthest``), the two
    mutually nearest (``nearest``) or two random points (``random``). The next
    city is the one farthest from / nearest to the current sub-tour, or the
    next one in a seeded random order. Ties go to the lowest index.
    """
    if rule not in INSERTION_RULES:
        raise InvalidInputError(f"unknown insertion rule {rule!r}; expected one of {INSERTION_RULES}")
    D = _matrix(inst)
    n = inst.n
    if rule == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
        tour = [int(order[0]), int(order[1])]
        rest = iter(int(v) for v in order[2:])
    else:
        masked = D.copy()
        if rule == "nearest":
            np.fill_diagonal(masked, np.inf)
            flat = int(np.argmin(masked))
        else:
            flat = int(np.argmax(masked))
        a, b = divmod(flat, n)
        tour = [min(a, b), max(a, b)]
        in_tour = np.zeros(n, dtype=bool)
        in_tour[tour] = True
        near = np.minimum(D[tour[0]], D[tour[1]])
    while len(tour) < n:
        if rule == "random":
            c = next(rest)
        else:
            score = np.where(in_tour, np.nan, near)
            c = int(np.nanargmin(score) if rule == "nearest" else np.nanargmax(score))
            in_tour[c] = True
            near = np.minimum(near, D[c])
        t = np.asarray(tour)
        nxt = np.roll(t, -1)
        cost = D[t, c] + D[c, nxt] - D[t, nxt]
        tour.insert(int(np.argmin(cost)) + 1, c)
    return Tour.from_order(inst, tour)


def nearest_neighbor(inst: Instance, start: int = 0) -> Tour:
    D = _matrix(inst)
    n = inst.n
    seen = np.zeros(n, dtype=bool)
    order = [start]
    seen[start] = True
    for _ in range(n - 1):
        d = np.where(seen, np.inf, D[order[-1]])
        c = int(np.argmin(d))
        order.append(c)
        seen[c] = True
    return Tour.from_order(inst, order)


def two_opt(inst: Instance, initial: Tour | None = None, budget: int | None = None,
            tol: float = 1e-12) -> Tour:
    """First-improvement 2-opt.

    Edges ``(t[i], t[i+1])`` are scanned with ``i`` ascending; for each ``i``
    the first ``j`` (ascending) whose exchange shortens the tour by more than
    ``tol`` is applied and the same ``i`` is rescanned. Stops at a local
    optimum or after ``budget`` accepted moves. Starts from the nearest
    neighbor tour from vertex 0 when ``initial`` is omitted.
    """
    D = _matrix(inst)
    n = inst.n
    t = np.array(initial.order if initial is not None else nearest_neighbor(inst).order, dtype=np.int64)
    check_permutation(t, n)
    moves = 0
    improved = True
    while improved:
        improved = False
        i = 0
        while i < n - 2:
            if budget is not None and moves >= budget:
                return Tour.from_order(inst, t)
            a, b = t[i], t[i + 1]
            j_hi = n - 1 if i > 0 else n - 2
            js = np.arange(i + 2, j_hi + 1)
            c = t[js]
            d = t[(js + 1) % n]
            delta = D[a, c] + D[b, d] - D[a, b] - D[c, d]
            hit = np.flatnonzero(delta < -tol)
            if hit.size:
                j = int(js[hit[0]])
                t[i + 1:j + 1] = t[i + 1:j + 1][::-1].copy()
                moves += 1
                improved = True
                continue
            i += 1
    return Tour.from_order(inst, t)


def held_karp(inst: Instance) -> Tour:
    """Exact dynamic program over subsets; vertex 0 is fixed as the tour start."""
    n = inst.n
    if n > HELD_KARP_MAX:
        raise TooLargeError(f"held_karp supports n <= {HELD_KARP_MAX}, got {n}")
    D = _matrix(inst)
    m = n - 1
    W = D[1:, 1:]
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    bits = np.arange(m)
    dp[1 << bits, bits] = D[0, 1:]
    masks = np.arange(full)
    popcount = np.zeros(full, dtype=np.int64)
    for b in range(m):
        popcount += (masks >> b) & 1
    for size in range(2, m + 1):
        layer = masks[popcount == size]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = dp[prev] + W[:, j]
            k = np.argmin(cand, axis=1)
            dp[sel, j] = cand[np.arange(len(sel)), k]
            parent[sel, j] = k
    last = int(np.argmin(dp[full - 1] + D[1:, 0]))
    order = []
    mask = full - 1
    j = last
    while j >= 0:
        order.append(j + 1)
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
    order.append(0)
    return Tour.from_order(inst, order[::-1])


def brute_force(inst: Instance, chunk: int = 1 << 16) -> Tour:
    """Enumerate all ``(n-1)!`` tours starting at vertex 0."""
    n = inst.n
    if n > BRUTE_FORCE_MAX:
        raise TooLargeError(f"brute_force supports n <= {BRUTE_FORCE_MAX}, got {n}")
    D = _matrix(inst)
    best_len, best = np.inf, None
    perms = itertools.permutations(range(1, n))
    while True:
        block = np.array(list(itertools.islice(perms, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        full = np.concatenate([np.zeros((len(block), 1), dtype=np.int64), block], axis=1)
        lengths = D[full, np.roll(full, -1, axis=1)].sum(axis=1)
        i = int(np.argmin(lengths))
        if lengths[i] < best_len:
            best_len, best = lengths[i], full[i]
    return Tour.from_order(inst, best)


ALGORITHMS = {
    "fi": lambda inst, seed: insertion(inst, "farthest", seed),
    "ri": lambda inst, seed: insertion(inst, "random", seed),
    "ni": lambda inst, seed: insertion(inst, "nearest", seed),
    "nn": lambda inst, seed: nearest_neighbor(inst),
    "2opt": lambda inst, seed: two_opt(inst),
    "held-karp": lambda inst, seed: held_karp(inst),
    "brute-force": lambda inst, seed: brute_force(inst),
}
ALIASES = {
    "farthest-insertion": "fi",
    "random-insertion": "ri",
    "nearest-insertion": "ni",
    "nearest-neighbor": "nn",
    "two-opt": "2opt",
    "2-opt": "2opt",
    "hk": "held-karp",
    "bf": "brute-force",
}


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in ALGORITHMS:
        raise InvalidInputError(f"unknown baseline {name!r}")
    return key


def run_baseline(name: str, inst: Instance, seed=0) -> BaselineResult:
    """Run a named baseline and time it."""
    key = canonical_name(name)
    t0 = time.perf_counter()
    tour = ALGORITHMS[key](inst, seed)
    return BaselineResult(tour, key, (time.perf_counter() - t0) * 1000.0)
