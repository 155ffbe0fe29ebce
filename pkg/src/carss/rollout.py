"""Batched rollouts of both policies over the game environment.

A generation batch is ``R`` rollouts, each on one of ``B`` instances of the
same size (``owner[r]`` names the instance). Vertex embeddings are computed
once per instance and shared by all of its rollouts. A merging batch fans
each finished generation state out to one or more merge start endpoints.

Passing ``forced`` replays previously chosen actions instead of selecting new
ones; the environment is deterministic given actions, so a replay rebuilds
the same log-probabilities as a differentiable function of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .env import (
    GENERATION,
    GameState,
    GenAction,
    MergeAction,
    MergeState,
    build_merge_graph,
    extract_tour,
    init_state,
    random_starts,
    step_generation,
    step_merging,
)
from .policy import GenerationPolicy, MergePolicy, gen_inputs, gen_log_probs, select
from .tsp import Instance


def _dtype(module):
    return next(module.parameters()).dtype


def encode_instances(policy: GenerationPolicy, instances) -> torch.Tensor:
    coords = np.stack([inst.coords for inst in instances])
    return policy.encode(torch.as_tensor(coords, dtype=_dtype(policy)))


@dataclass
class GenerationRollout:
    states: list
    log_probs: torch.Tensor
    choices: np.ndarray
    inputs: list

    @property
    def n_steps(self) -> int:
        return self.log_probs.shape[1]


def run_generation(policy: GenerationPolicy, instances, starts, owner=None, mode="sample",
                   rng=None, forced=None, H=None, keep_inputs=False) -> GenerationRollout:
    """Roll out the generation phase for every start group in ``starts`` (R, K).

    Returns log-probabilities of shape (R, T', K) and chosen slot indices (T', R, K).
    """
    starts = np.asarray(starts, dtype=np.int64)
    R, K = starts.shape
    owner = np.zeros(R, dtype=np.int64) if owner is None else np.asarray(owner, dtype=np.int64)
    if H is None:
        H = encode_instances(policy, instances)
    Hr = H[torch.from_numpy(owner)]
    states = [init_state(instances[owner[r]], K, starts[r]) for r in range(R)]
    rows = torch.arange(R).unsqueeze(1)
    memory = [Hr[rows, torch.from_numpy(starts)]]
    step_lp, choices, kept = [], [], []
    t = 0
    while states[0].phase == GENERATION:
        inp = gen_inputs(states)
        if keep_inputs:
            kept.append(inp)
        lp = gen_log_probs(policy, Hr, inp, torch.stack(memory, dim=2))
        idx = forced[t] if forced is not None else select(lp, mode, rng)
        idx = np.asarray(idx, dtype=np.int64)
        ti = torch.from_numpy(idx)
        step_lp.append(lp.gather(-1, ti.unsqueeze(-1)).squeeze(-1))
        verts = np.take_along_axis(inp.slots, idx[..., None], axis=-1)[..., 0]
        for r, s in enumerate(states):
            step_generation(s, [GenAction(k, int(verts[r, k]), inp.sides[r][k][idx[r, k]])
                                for k in range(K)])
        memory.append(Hr[rows, torch.from_numpy(verts)])
        choices.append(idx)
        t += 1
    if step_lp:
        log_probs = torch.stack(step_lp, dim=1)
        ch = np.stack(choices)
    else:
        log_probs = Hr.new_zeros((R, 0, K))
        ch = np.zeros((0, R, K), dtype=np.int64)
    return GenerationRollout(states, log_probs, ch, kept)


@dataclass
class MergeRollout:
    states: list
    graphs: list
    log_probs: torch.Tensor
    choices: np.ndarray
    lengths: np.ndarray
    owner: np.ndarray

    def tours(self):
        return [extract_tour(ms) for ms in self.states]


def run_merging(policy: MergePolicy, gen_states, q_starts=None, owner=None, mode="sample",
                rng=None, forced=None, keep_masks=None) -> MergeRollout:
    """Merge every generation state from the given start endpoints.

    ``q_starts=None`` enumerates all ``2(K + |I|)`` starts for each state, the
    POMO layout used in training and inference; rollout ``j`` then belongs to
    state ``j // P`` and starts at ``j % P``.
    Returns log-probabilities of shape (Rm, K + |I| - 1).
    """
    graphs = [build_merge_graph(s) for s in gen_states]
    P = graphs[0].size
    if q_starts is None:
        owner = np.repeat(np.arange(len(gen_states)), P)
        q_starts = np.tile(np.arange(P), len(gen_states))
    owner = np.asarray(owner, dtype=np.int64)
    q_starts = np.asarray(q_starts, dtype=np.int64)
    feats = np.stack([g.features(s.inst) for g, s in zip(graphs, gen_states)])
    Hm = policy.encode(torch.as_tensor(feats, dtype=_dtype(policy)))
    Hsel = Hm[torch.from_numpy(owner)]
    states = [MergeState(gen_states[o], graphs[o], q) for o, q in zip(owner, q_starts)]
    n_steps = graphs[0].n_paths - 1
    step_lp, choices = [], []
    qs = torch.from_numpy(q_starts)
    for t in range(n_steps):
        mask = np.stack([ms.feasible_mask() for ms in states])
        if keep_masks is not None:
            keep_masks.append(mask)
        q_prev = torch.tensor([ms.q_prev for ms in states])
        lp = policy.log_probs(Hsel, qs, q_prev, torch.from_numpy(mask))
        idx = forced[t] if forced is not None else select(lp, mode, rng)
        idx = np.asarray(idx, dtype=np.int64)
        step_lp.append(lp.gather(-1, torch.from_numpy(idx).unsqueeze(-1)).squeeze(-1))
        for ms, q in zip(states, idx):
            step_merging(ms, MergeAction(ms.p, int(q)))
        choices.append(idx)
    for ms in states:
        step_merging(ms, MergeAction(ms.p, ms.q_start))
    lengths = np.array([-ms.reward for ms in states])
    return MergeRollout(states, graphs, torch.stack(step_lp, dim=1), np.stack(choices),
                        lengths, owner)


def sample_start_groups(n: int, K: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` groups of ``K`` distinct start vertices."""
    return np.array([random_starts(n, K, rng) for _ in range(count)], dtype=np.int64)


@dataclass
class Solution:
    tour: object
    gen_state: GameState
    merge_state: MergeState


@torch.no_grad()
def solve_batch(gen_policy: GenerationPolicy, merge_policy: MergePolicy, instances, K: int,
                rollouts: int = 1, rng=None, mode: str = "greedy", starts=None) -> list[Solution]:
    """Best-of-rollouts CARSS inference for a batch of same-size instances.

    Each instance gets ``rollouts`` start groups (drawn from ``rng`` unless
    ``starts`` of shape (B, rollouts, K) is given); every finished generation
    state is merged from all of its endpoints and the shortest tour is kept.
    """
    B = len(instances)
    n = instances[0].n
    if starts is None:
        rng = np.random.default_rng(0) if rng is None else rng
        starts = np.stack([sample_start_groups(n, K, rollouts, rng) for _ in range(B)])
    starts = np.asarray(starts, dtype=np.int64).reshape(B * rollouts, K)
    owner = np.repeat(np.arange(B), rollouts)
    gen = run_generation(gen_policy, instances, starts, owner, mode=mode, rng=rng)
    mer = run_merging(merge_policy, gen.states, mode=mode, rng=rng)
    P = mer.graphs[0].size
    lengths = mer.lengths.reshape(B, rollouts * P)
    out = []
    for b in range(B):
        j = int(np.argmin(lengths[b]))
        ms = mer.states[b * rollouts * P + j]
        out.append(Solution(extract_tour(ms), ms.gen, ms))
    return out


def solve(gen_policy, merge_policy, inst: Instance, K: int, rollouts: int = 1, rng=None,
          mode: str = "greedy") -> Solution:
    return solve_batch(gen_policy, merge_policy, [inst], K, rollouts, rng, mode)[0]
