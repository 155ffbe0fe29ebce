"""Shared fixtures-as-functions and the finite-difference oracle."""

import math

import numpy as np
import torch

from carss.env import (
    GENERATION,
    MERGING,
    build_merge_graph,
    extract_tour,
    feasible_gen_actions,
    feasible_merge_actions,
    init_state,
    random_starts,
    start_merging,
    step_generation,
    step_merging,
    tour_edges,
)
from carss.policy import GenerationPolicy, MergePolicy, PolicyConfig
from carss.tsp import Instance

SQUARE = Instance([[0, 0], [1, 0], [1, 1], [0, 1]], id="square")


def tiny_config(d=8, **kw):
    base = dict(d_model=d, d_ff=2 * d, n_heads=2, vertex_layers=1, agent_layers=1,
                memory_layers=1, merge_layers=1, merge_decoder_layers=1)
    base.update(kw)
    return PolicyConfig(**base)


def tiny_policies(d=8, dtype=torch.float64, seed=0, **kw):
    cfg = tiny_config(d, **kw)
    return (GenerationPolicy(cfg, seed=seed).to(dtype),
            MergePolicy(cfg, seed=seed + 1).to(dtype))


def flat_params(modules):
    return [p for m in modules for p in m.parameters()]


def directional_fd_errors(objective, params, n_probes, seed=0, eps=1e-6):
    """Relative errors between ``grad . v`` and a central difference along ``v``.

    ``objective()`` must rebuild its value from the current parameter tensors.
    Perturbations are applied in place under ``torch.no_grad`` and undone.
    """
    value = objective()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_probes):
        dirs = [torch.as_tensor(rng.standard_normal(tuple(p.shape)), dtype=p.dtype) for p in params]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
        with torch.no_grad():
            for p, v in zip(params, dirs):
                p.add_(eps * v)
            plus = float(objective())
            for p, v in zip(params, dirs):
                p.sub_(2 * eps * v)
            minus = float(objective())
            for p, v in zip(params, dirs):
                p.add_(eps * v)
        numeric = (plus - minus) / (2 * eps)
        scale = max(abs(numeric), abs(analytic), 1e-300)
        errs.append(abs(numeric - analytic) / scale)
    return errs


def reference_cycle_length(coords, order):
    total = 0.0
    for a, b in zip(order, list(order[1:]) + [order[0]]):
        total += math.dist(coords[a], coords[b])
    return total


def check_rollout(inst, K, rng):
    """Replays a random rollout and checks every environment invariant."""
    n = inst.n
    cap = math.ceil(n / K)
    s = init_state(inst, K, random_starts(n, K, rng))
    while s.phase == GENERATION:
        acts = feasible_gen_actions(s)
        union = [a.vertex for lst in acts for a in lst]
        assert len(union) == len(set(union))
        assert not s.visited[union].any()
        for lst in acts:
            assert 1 <= len(lst) <= cap
        step_generation(s, [lst[rng.integers(len(lst))] for lst in acts])
        lens = {len(p) for p in s.paths}
        assert lens == {s.t + 1}
        seen = [v for p in s.paths for v in p.vertices]
        assert len(seen) == len(set(seen))
        assert sorted(seen) == np.flatnonzero(s.visited).tolist()
    iso = len(s.isolated)
    assert K * (s.t_prime + 1) + iso == n and 1 <= iso <= K
    g = build_merge_graph(s)
    assert g.size == 2 * (K + iso) <= 4 * K
    ms = start_merging(s, g, int(rng.integers(g.size)))
    while ms.phase == MERGING:
        acts = feasible_merge_actions(ms)
        step_merging(ms, acts[rng.integers(len(acts))])
    edges = tour_edges(ms)
    assert len(edges) == n
    tour = extract_tour(ms)
    assert sorted(tour.order.tolist()) == list(range(n))
    edge_set = {frozenset(e) for e in edges}
    order = tour.order.tolist()
    assert edge_set == {frozenset((a, b)) for a, b in zip(order, order[1:] + order[:1])}
    assert ms.reward == -tour.length
