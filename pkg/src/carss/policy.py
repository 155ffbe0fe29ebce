"""Attention policies for subpath generation and subpath merging.

Both policies are batched over rollouts. During generation every rollout of
the same ``(n, K)`` has identical tensor shapes (``K`` agents, ``ceil(n/K)``
candidate slots, memory length ``t + 1``), and during merging every rollout
has the same merge-graph size, so no ragged padding is needed across the
batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .env import (
    GENERATION,
    MERGING,
    GameState,
    GenAction,
    MergeAction,
    MergeGraph,
    MergeState,
    action_cap,
    assign,
    feasible_gen_actions,
    shifted_partner,
)
from .exceptions import InvalidConfigError
from .nn import (
    CLIP,
    AttentionBlock,
    FeedForward,
    clipped_logits,
    init_parameters,
    masked_log_softmax,
    parameter_count,
)
from .tsp import Instance


@dataclass
class PolicyConfig:
    """Network sizes shared by both policies.

    The defaults are scaled for a desktop CPU. :meth:`full_scale` gives the
    256/512/8-head configuration.
    """

    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    vertex_layers: int = 3
    agent_layers: int = 3
    memory_layers: int = 1
    merge_layers: int = 3
    merge_decoder_layers: int = 1
    clip: float = CLIP
    residual: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InvalidConfigError("d_model must be divisible by n_heads")
        for name in ("d_model", "d_ff", "n_heads"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")

    @classmethod
    def full_scale(cls) -> "PolicyConfig":
        return cls(d_model=256, d_ff=512, n_heads=8)

    def to_dict(self):
        return asdict(self)


def _blocks(cfg: PolicyConfig, count: int, use_ffn: bool = True):
    return nn.ModuleList(
        AttentionBlock(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.residual, use_ffn)
        for _ in range(count)
    )


def _gather_rows(H, idx):
    """``H``: (R, n, d); ``idx``: (R, ...) long -> (R, ..., d)."""
    R = H.shape[0]
    flat = idx.reshape(R, -1)
    out = torch.gather(H, 1, flat.unsqueeze(-1).expand(-1, -1, H.shape[-1]))
    return out.reshape(*idx.shape, H.shape[-1])


class GenerationPolicy(nn.Module):
    """Per-agent distributions over assigned candidate vertices."""

    def __init__(self, cfg: PolicyConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or PolicyConfig()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(2, d)
        self.encoder = _blocks(cfg, cfg.vertex_layers)
        self.comm = FeedForward(2 * d, cfg.d_ff, d)
        self.context = FeedForward(4 * d, cfg.d_ff, d)
        self.agent_encoder = _blocks(cfg, cfg.agent_layers)
        self.memory_decoder = _blocks(cfg, cfg.memory_layers)
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        init_parameters(self, seed)

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        """(B, n, 2) coordinates -> (B, n, d) vertex embeddings."""
        h = self.embed(coords)
        for block in self.encoder:
            h = block(h)
        return h

    def log_probs(self, H, front, rear, unvisited, memory, slots, slot_mask):
        """Masked log-probabilities over candidate slots.

        Shapes: ``H`` (R, n, d); ``front``/``rear`` (R, K) long; ``unvisited``
        (R, n) bool; ``memory`` (R, K, L, d); ``slots`` (R, K, S) long;
        ``slot_mask`` (R, K, S) bool. Returns (R, K, S).
        """
        R, K = front.shape
        d = self.cfg.d_model
        hf = _gather_rows(H, front)
        hr = _gather_rows(H, rear)
        comm = self.comm(torch.cat([hf, hr], dim=-1))
        w = unvisited.to(H.dtype)
        mean_unvisited = (H * w.unsqueeze(-1)).sum(1) / w.sum(1, keepdim=True)
        ctx = self.context(torch.cat(
            [hf, hr, mean_unvisited.unsqueeze(1).expand(-1, K, -1), comm], dim=-1))
        for block in self.agent_encoder:
            ctx = block(ctx)
        h = ctx.reshape(R * K, 1, d)
        mem = memory.reshape(R * K, memory.shape[2], d)
        for block in self.memory_decoder:
            h = block(h, mem)
        q = self.query(h.reshape(R, K, d))
        keys = self.key(_gather_rows(H, slots))
        scores = (keys @ q.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
        return masked_log_softmax(clipped_logits(scores, self.cfg.clip), slot_mask)


class MergePolicy(nn.Module):
    """Distribution over merge-graph endpoints for the next connecting edge."""

    def __init__(self, cfg: PolicyConfig | None = None, seed: int = 1):
        super().__init__()
        cfg = cfg or PolicyConfig()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(4, d)
        self.encoder = _blocks(cfg, cfg.merge_layers)
        self.state = nn.Linear(3 * d, d)
        self.decoder = _blocks(cfg, cfg.merge_decoder_layers, use_ffn=False)
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        init_parameters(self, seed)

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        """(B, P, 4) endpoint features -> (B, P, d)."""
        h = self.embed(features)
        for block in self.encoder:
            h = block(h)
        return h

    def log_probs(self, H, q_start, q_prev, mask):
        """``H`` (R, P, d); ``q_start``/``q_prev`` (R,) long; ``mask`` (R, P) bool -> (R, P)."""
        d = self.cfg.d_model
        h_graph = H.mean(dim=1)
        h_front = _gather_rows(H, q_start.unsqueeze(1)).squeeze(1)
        h_rear = _gather_rows(H, q_prev.unsqueeze(1)).squeeze(1)
        h = self.state(torch.cat([h_graph, h_front, h_rear], dim=-1)).unsqueeze(1)
        attn_mask = mask.unsqueeze(1)
        for block in self.decoder:
            h = block(h, H, attn_mask)
        q = self.query(h)
        keys = self.key(H)
        scores = (q @ keys.transpose(1, 2)).squeeze(1) / math.sqrt(d)
        return masked_log_softmax(clipped_logits(scores, self.cfg.clip), mask)


def describe(module: nn.Module) -> list[tuple[str, tuple, int]]:
    return [(name, tuple(p.shape), p.numel()) for name, p in module.named_parameters()]


# -- building policy inputs from environment states ---------------------------


def lowest_index_padding(n, cands, count, rng=None):
    """Lowest-index vertices outside ``cands``."""
    taken = np.zeros(n, dtype=bool)
    taken[cands] = True
    return np.flatnonzero(~taken)[:count]


def random_padding(n, cands, count, rng):
    taken = np.zeros(n, dtype=bool)
    taken[cands] = True
    return rng.permutation(np.flatnonzero(~taken))[:count]


@dataclass
class GenInputs:
    """Numpy inputs for one generation step of ``R`` rollouts."""

    front: np.ndarray
    rear: np.ndarray
    unvisited: np.ndarray
    slots: np.ndarray
    slot_mask: np.ndarray
    sides: list
    assignments: list = field(default_factory=list)


def gen_inputs(states, assignments=None, pad=lowest_index_padding, rng=None) -> GenInputs:
    R = len(states)
    n, K = states[0].n, states[0].K
    S = action_cap(n, K)
    front = np.empty((R, K), dtype=np.int64)
    rear = np.empty((R, K), dtype=np.int64)
    unvisited = np.empty((R, n), dtype=bool)
    slots = np.empty((R, K, S), dtype=np.int64)
    mask = np.zeros((R, K, S), dtype=bool)
    sides = []
    used = []
    for r, s in enumerate(states):
        a = assign(s) if assignments is None else assignments[r]
        used.append(a)
        acts = feasible_gen_actions(s, a, S)
        unvisited[r] = ~s.visited
        row_sides = []
        for k, lst in enumerate(acts):
            front[r, k] = s.paths[k].front
            rear[r, k] = s.paths[k].rear
            cands = np.fromiter((x.vertex for x in lst), dtype=np.int64, count=len(lst))
            slots[r, k, :len(lst)] = cands
            mask[r, k, :len(lst)] = True
            if len(lst) < S:
                slots[r, k, len(lst):] = pad(n, cands, S - len(lst), rng)
            row_sides.append([x.side for x in lst])
        sides.append(row_sides)
    return GenInputs(front, rear, unvisited, slots, mask, sides, used)


def _t(x, dtype=None):
    return torch.from_numpy(np.ascontiguousarray(x)) if dtype is None else torch.as_tensor(x, dtype=dtype)


def gen_log_probs(policy: GenerationPolicy, H, inputs: GenInputs, memory):
    return policy.log_probs(
        H, _t(inputs.front), _t(inputs.rear), _t(inputs.unvisited), memory,
        _t(inputs.slots), _t(inputs.slot_mask),
    )


def select(log_probs: torch.Tensor, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick one index along the last axis: ``argmax`` or a draw from the distribution."""
    if mode == "greedy":
        return log_probs.detach().argmax(dim=-1).numpy()
    if mode != "sample":
        raise InvalidConfigError(f"unknown decoding mode {mode!r}")
    p = log_probs.detach().to(torch.float64).exp().numpy()
    c = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1]) * c[..., -1]
    idx = (c <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


# -- single-state interface ---------------------------------------------------


@dataclass
class GenEpisodeCache:
    """Vertex embeddings for one instance plus the growing per-agent memory."""

    H: torch.Tensor
    memory: list

    @property
    def memory_tensor(self) -> torch.Tensor:
        """(K, L, d) with ``L`` = generation steps taken + 1."""
        return torch.stack(self.memory, dim=1)


def start_episode(policy: GenerationPolicy, s: GameState) -> GenEpisodeCache:
    """Encode the instance and seed memory with the start-vertex embeddings."""
    H = encode_vertices(policy, s.inst)
    return GenEpisodeCache(H, [H[list(s.starts)]])


def encode_vertices(policy: GenerationPolicy, inst: Instance) -> torch.Tensor:
    dtype = next(policy.parameters()).dtype
    return policy.encode(torch.tensor(inst.coords, dtype=dtype).unsqueeze(0))[0]


@dataclass
class GenDistribution:
    log_probs: torch.Tensor
    slots: np.ndarray
    mask: np.ndarray
    sides: list

    @property
    def probs(self) -> np.ndarray:
        return self.log_probs.detach().exp().numpy()

    def vertex(self, k: int, slot: int) -> int:
        return int(self.slots[k, slot])


def gen_distribution(s: GameState, a, cache: GenEpisodeCache, policy: GenerationPolicy,
                     pad=lowest_index_padding, rng=None) -> GenDistribution:
    if s.phase != GENERATION:
        raise InvalidConfigError("generation distribution requested outside generation")
    inputs = gen_inputs([s], None if a is None else [a], pad, rng)
    lp = gen_log_probs(policy, cache.H.unsqueeze(0), inputs, cache.memory_tensor.unsqueeze(0))
    return GenDistribution(lp[0], inputs.slots[0], inputs.slot_mask[0], inputs.sides[0])


def gen_act(dist: GenDistribution, mode: str = "greedy", rng=None):
    """Joint action and its log-probability (sum of per-agent log-probabilities)."""
    idx = select(dist.log_probs, mode, rng)
    actions = [GenAction(k, dist.vertex(k, j), dist.sides[k][j]) for k, j in enumerate(idx)]
    logp = dist.log_probs[torch.arange(len(idx)), torch.from_numpy(idx)].sum()
    return actions, logp


def update_memory(cache: GenEpisodeCache, actions) -> GenEpisodeCache:
    verts = [a.vertex for a in sorted(actions, key=lambda a: a.agent)]
    cache.memory.append(cache.H[verts])
    return cache


def encode_merge_graph(policy: MergePolicy, g: MergeGraph, inst: Instance) -> torch.Tensor:
    dtype = next(policy.parameters()).dtype
    feats = torch.as_tensor(g.features(inst), dtype=dtype).unsqueeze(0)
    return policy.encode(feats)[0]


@dataclass
class MergeDistribution:
    log_probs: torch.Tensor
    mask: np.ndarray
    q_prev: int
    graph: MergeGraph

    @property
    def probs(self) -> np.ndarray:
        return self.log_probs.detach().exp().numpy()


def merge_distribution(ms: MergeState, H: torch.Tensor, policy: MergePolicy) -> MergeDistribution:
    if ms.phase != MERGING or ms.is_final_step:
        raise InvalidConfigError("the closing edge is forced; no distribution is needed")
    mask = ms.feasible_mask()
    lp = policy.log_probs(
        H.unsqueeze(0),
        torch.tensor([ms.q_start]), torch.tensor([ms.q_prev]),
        torch.from_numpy(mask).unsqueeze(0),
    )[0]
    return MergeDistribution(lp, mask, ms.q_prev, ms.graph)


def merge_act(dist: MergeDistribution, mode: str = "greedy", rng=None):
    """Next merge edge ``(p, q)``; ``p`` comes from the index shift applied to ``q_prev``."""
    q = int(select(dist.log_probs.unsqueeze(0), mode, rng)[0])
    p = shifted_partner(dist.graph, dist.q_prev)
    return MergeAction(p, q), dist.log_probs[q]


def policy_summary(gen: GenerationPolicy, merge: MergePolicy) -> str:
    lines = []
    for label, module in (("generation", gen), ("merging", merge)):
        lines.append(f"[{label}] parameters: {parameter_count(module)}")
        for name, shape, count in describe(module):
            lines.append(f"  {name:<40s} {str(shape):<16s} {count}")
    return "\n".join(lines)
