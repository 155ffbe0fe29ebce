"""Independent REINFORCE with POMO-style shared baselines.

For each training instance, ``N`` generation trajectories are sampled from
random start groups. Every finished generation state is merged from all
``2(K + |I|)`` endpoints. Returns are negative tour lengths. Generation
advantages compare each trajectory's selected merge return against the mean
over trajectories; merging advantages compare each merge start against the
mean over starts of the same trajectory.
"""

from __future__ import annotations

import configparser
import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .exceptions import InvalidConfigError, TrainingDivergedError
from .nn import adam_step, load_into, make_adam, read_checkpoint, save_checkpoint
from .policy import GenerationPolicy, MergePolicy, PolicyConfig
from .rollout import run_generation, run_merging, sample_start_groups, solve_batch
from .tsp import Instance, generate_instances

LOG_COLUMNS = ["batch", "mean_return", "b_d", "grad_norm_theta", "grad_norm_phi", "wall_ms"]
BASELINE_MODES = ("pomo", "none")
SELECTION_MODES = ("best", "paper-literal-min")


@dataclass
class TrainConfig:
    epochs: int = 1
    batches_per_epoch: int = 100
    batch_size: int = 32
    n_samples: int = 8
    n_agents: int = 2
    n_nodes: int = 20
    lr: float = 1e-4
    seed: int = 0
    baseline: str = "pomo"
    return_selection: str = "best"
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    dtype: str = "float32"
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)
        for name in ("epochs", "batches_per_epoch", "batch_size", "n_samples", "n_agents", "n_nodes"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        if not self.lr > 0:
            raise InvalidConfigError("lr must be positive")
        if self.n_agents < 2 or 2 * self.n_agents > self.n_nodes:
            raise InvalidConfigError("need 2 <= n_agents <= n_nodes / 2")
        if self.baseline not in BASELINE_MODES:
            raise InvalidConfigError(f"baseline must be one of {BASELINE_MODES}")
        if self.return_selection not in SELECTION_MODES:
            raise InvalidConfigError(f"return_selection must be one of {SELECTION_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = asdict(self)
        d["policy"] = self.policy.to_dict()
        return d


_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "policy"}


def _convert(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidConfigError(f"not a boolean: {value!r}")
    try:
        return type(default)(value.strip())
    except ValueError:
        raise InvalidConfigError(f"cannot parse {value!r} as {type(default).__name__}") from None


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read a ``[train]`` / ``[policy]`` INI file; ``overrides`` win over file values."""
    base = TrainConfig()
    train_vals, policy_vals = {}, {}
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise InvalidConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            if section not in ("train", "policy"):
                raise InvalidConfigError(f"{path}: unknown section [{section}]")
        pdefault = base.policy.to_dict()
        for key, value in (cp["train"].items() if cp.has_section("train") else []):
            if key not in _TRAIN_KEYS:
                raise InvalidConfigError(f"{path}: unknown [train] key {key!r}")
            train_vals[key] = _convert(value, getattr(base, key))
        for key, value in (cp["policy"].items() if cp.has_section("policy") else []):
            if key not in pdefault:
                raise InvalidConfigError(f"{path}: unknown [policy] key {key!r}")
            policy_vals[key] = _convert(value, pdefault[key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _TRAIN_KEYS:
            train_vals[key] = value
        elif key in base.policy.to_dict():
            policy_vals[key] = value
        else:
            raise InvalidConfigError(f"unknown setting {key!r}")
    return TrainConfig(**train_vals, policy=PolicyConfig(**policy_vals))


# -- rollouts and estimators --------------------------------------------------


@dataclass
class RolloutRecord:
    """One instance's POMO rollouts.

    ``gen_log_probs`` (N, T', K), ``merge_log_probs`` (N, M, K + |I| - 1) and
    ``returns`` (N, M) with ``M = 2(K + |I|)``.
    """

    instance_id: str
    starts: np.ndarray
    gen_log_probs: torch.Tensor
    merge_log_probs: torch.Tensor
    returns: np.ndarray
    gen_choices: np.ndarray = None
    merge_choices: np.ndarray = None

    @property
    def n_samples(self) -> int:
        return self.returns.shape[0]

    @property
    def n_merge_starts(self) -> int:
        return self.returns.shape[1]

    def selected_returns(self, selection: str = "best") -> np.ndarray:
        if selection == "best":
            return self.returns.max(axis=1)
        if selection == "paper-literal-min":
            return self.returns.min(axis=1)
        raise InvalidConfigError(f"unknown return selection {selection!r}")


def rollout_batch(instances, gen_policy, merge_policy, N: int, K: int, rng, mode="sample",
                  starts=None, forced=None) -> list[RolloutRecord]:
    """POMO rollouts for several same-size instances in one batched pass.

    ``forced`` is ``(gen_choices, merge_choices)`` as returned in the records of
    an earlier call with the same ``starts``; it replays those actions.
    """
    B = len(instances)
    n = instances[0].n
    if starts is None:
        starts = np.stack([sample_start_groups(n, K, N, rng) for _ in range(B)])
    starts = np.asarray(starts, dtype=np.int64)
    owner = np.repeat(np.arange(B), N)
    gf = mf = None
    if forced is not None:
        gf, mf = forced
    gen = run_generation(gen_policy, instances, starts.reshape(B * N, K), owner, mode=mode,
                         rng=rng, forced=gf)
    mer = run_merging(merge_policy, gen.states, mode=mode, rng=rng, forced=mf)
    M = mer.graphs[0].size
    returns = -mer.lengths.reshape(B, N, M)
    glp = gen.log_probs.reshape(B, N, *gen.log_probs.shape[1:])
    mlp = mer.log_probs.reshape(B, N, M, -1)
    gch = gen.choices.reshape(gen.choices.shape[0], B, N, K)
    mch = mer.choices.reshape(mer.choices.shape[0], B, N, M)
    return [
        RolloutRecord(inst.id, starts[b], glp[b], mlp[b], returns[b], gch[:, b], mch[:, b])
        for b, inst in enumerate(instances)
    ]


def replay_batch(instances, gen_policy, merge_policy, records) -> list[RolloutRecord]:
    """Recompute log-probabilities of recorded actions under the current parameters."""
    K = records[0].starts.shape[-1]
    N = records[0].n_samples
    gf = np.stack([r.gen_choices for r in records], axis=1)
    gf = gf.reshape(gf.shape[0], -1, K)
    mf = np.stack([r.merge_choices for r in records], axis=1)
    mf = mf.reshape(mf.shape[0], -1)
    return rollout_batch(instances, gen_policy, merge_policy, N, K, None,
                         starts=np.stack([r.starts for r in records]), forced=(gf, mf))


def rollout_pomo(inst: Instance, gen_policy, merge_policy, N: int, K: int, rng) -> RolloutRecord:
    return rollout_batch([inst], gen_policy, merge_policy, N, K, rng)[0]


def pomo_baselines(rec: RolloutRecord, selection: str = "best", mode: str = "pomo"):
    """``(b_d, b_c)``: the generation baseline (scalar) and per-trajectory merging baselines (N,)."""
    if mode == "none":
        return 0.0, np.zeros(rec.n_samples)
    if mode != "pomo":
        raise InvalidConfigError(f"unknown baseline mode {mode!r}")
    b_d = float(rec.selected_returns(selection).mean())
    b_c = rec.returns.mean(axis=1)
    return b_d, b_c


def generation_advantages(rec, b_d, selection="best") -> np.ndarray:
    return rec.selected_returns(selection) - b_d


def merging_advantages(rec, b_c) -> np.ndarray:
    return rec.returns - np.asarray(b_c)[:, None]


def generation_objective(rec: RolloutRecord, b_d, selection="best") -> torch.Tensor:
    """Surrogate whose gradient is the generation policy-gradient estimate."""
    lp = rec.gen_log_probs
    adv = torch.as_tensor(generation_advantages(rec, b_d, selection), dtype=lp.dtype)
    per_agent = lp.sum(dim=1)
    return (adv[:, None] * per_agent).mean(dim=1).mean()


def merging_objective(rec: RolloutRecord, b_c) -> torch.Tensor:
    lp = rec.merge_log_probs
    adv = torch.as_tensor(merging_advantages(rec, b_c), dtype=lp.dtype)
    return (adv * lp.sum(dim=2)).mean(dim=1).mean()


def _grads(objective, params):
    if not objective.requires_grad:
        raise InvalidConfigError("log-probabilities carry no autograd graph")
    gs = torch.autograd.grad(objective, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for g, p in zip(gs, params)]


def grad_theta(rec, b_d, gen_policy, selection="best"):
    """Ascent direction for the generation parameters."""
    return _grads(generation_objective(rec, b_d, selection), list(gen_policy.parameters()))


def grad_phi(rec, b_c, merge_policy):
    return _grads(merging_objective(rec, b_c), list(merge_policy.parameters()))


def batch_objectives(records, baseline="pomo", selection="best"):
    """Mean generation and merging surrogates over a batch of instances."""
    gen_terms, merge_terms, bds = [], [], []
    for rec in records:
        b_d, b_c = pomo_baselines(rec, selection, baseline)
        bds.append(b_d)
        gen_terms.append(generation_objective(rec, b_d, selection))
        merge_terms.append(merging_objective(rec, b_c))
    return torch.stack(gen_terms).mean(), torch.stack(merge_terms).mean(), float(np.mean(bds))


# -- training loop ------------------------------------------------------------


def build_policies(cfg: TrainConfig):
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    gen = GenerationPolicy(cfg.policy, seed=int(seeds[0].generate_state(1)[0]))
    merge = MergePolicy(cfg.policy, seed=int(seeds[1].generate_state(1)[0]))
    gen.to(cfg.torch_dtype)
    merge.to(cfg.torch_dtype)
    return gen, merge


@dataclass
class TrainResult:
    gen_policy: GenerationPolicy
    merge_policy: MergePolicy
    log: list
    config: TrainConfig

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows, include_timing=True) -> str:
    """CSV text; ``include_timing=False`` leaves ``wall_ms`` blank so logs compare byte for byte."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in rows:
        vals = [repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS]
        if not include_timing:
            vals[-1] = ""
        w.writerow(vals)
    return buf.getvalue()


def save_policies(path, gen, merge, cfg: TrainConfig, optimizers=None, extra=None):
    meta = {"format": "carss-policies", "train": cfg.to_dict(), **(extra or {})}
    opts = None
    if optimizers is not None:
        opts = {"gen": optimizers[0], "merge": optimizers[1]}
    save_checkpoint(path, {"gen": gen, "merge": merge}, opts, meta)


def load_policies(path, dtype=torch.float32):
    """Return ``(gen_policy, merge_policy, config)`` from a checkpoint file."""
    meta, tensors = read_checkpoint(path)
    cfg = TrainConfig(**meta["train"])
    gen = GenerationPolicy(cfg.policy)
    merge = MergePolicy(cfg.policy)
    load_into({"gen": gen, "merge": merge}, tensors)
    return gen.to(dtype), merge.to(dtype), cfg


def train(cfg: TrainConfig, out_dir=None, instance_pool=None, progress=None,
          log_timing: bool = True) -> TrainResult:
    """Run ``epochs x batches_per_epoch`` optimizer steps.

    Training instances are drawn uniformly at random unless ``instance_pool``
    (a sequence of same-size instances) is given, in which case batches are
    sampled from it. With ``out_dir`` set, ``train_log.csv`` and
    ``checkpoint.ckpt`` are written there.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    gen, merge = build_policies(cfg)
    opt_gen = make_adam(gen.parameters(), lr=cfg.lr)
    opt_merge = make_adam(merge.parameters(), lr=cfg.lr)
    inst_ss, act_ss = np.random.SeedSequence(cfg.seed).spawn(3)[1:]
    inst_rng = np.random.default_rng(inst_ss)
    rng = np.random.default_rng(act_ss)
    K, n = cfg.n_agents, cfg.n_nodes
    if instance_pool is not None:
        instance_pool = list(instance_pool)
        n = instance_pool[0].n
    rows = []
    step = 0
    for _epoch in range(cfg.epochs):
        for _ in range(cfg.batches_per_epoch):
            t0 = time.perf_counter()
            if instance_pool is None:
                coords = inst_rng.random((cfg.batch_size, n, 2))
                batch = [Instance(c, id=f"train-{step}-{i}") for i, c in enumerate(coords)]
            else:
                pick = inst_rng.integers(len(instance_pool), size=cfg.batch_size)
                batch = [instance_pool[i] for i in pick]
            records = rollout_batch(batch, gen, merge, cfg.n_samples, K, rng)
            obj_gen, obj_merge, b_d = batch_objectives(records, cfg.baseline, cfg.return_selection)
            loss = -(obj_gen + obj_merge)
            if not torch.isfinite(loss):
                if out_dir is not None:
                    save_policies(out_dir / "diverged.ckpt", gen, merge, cfg,
                                  (opt_gen, opt_merge), {"batches_done": step})
                raise TrainingDivergedError(f"non-finite loss at batch {step}")
            loss.backward()
            norm_gen = adam_step(opt_gen, cfg.grad_clip)
            norm_merge = adam_step(opt_merge, cfg.grad_clip)
            mean_return = float(np.mean([r.returns.mean() for r in records]))
            row = {
                "batch": step,
                "mean_return": mean_return,
                "b_d": b_d,
                "grad_norm_theta": norm_gen,
                "grad_norm_phi": norm_merge,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            rows.append(row)
            step += 1
            if progress is not None:
                progress(row)
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_policies(out_dir / f"checkpoint-{step:06d}.ckpt", gen, merge, cfg,
                              (opt_gen, opt_merge), {"batches_done": step})
    if out_dir is not None:
        save_policies(out_dir / "checkpoint.ckpt", gen, merge, cfg, (opt_gen, opt_merge),
                      {"batches_done": step})
        (out_dir / "train_log.csv").write_text(format_log(rows, log_timing))
    return TrainResult(gen, merge, rows, cfg)


def evaluate(gen, merge, instances, K: int, rollouts: int = 1, seed: int = 0,
             chunk: int = 50) -> np.ndarray:
    """Greedy best-of-starts tour lengths, with start groups drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n = instances[0].n
    starts = np.stack([sample_start_groups(n, K, rollouts, rng) for _ in instances])
    out = []
    for lo in range(0, len(instances), chunk):
        sols = solve_batch(gen, merge, instances[lo:lo + chunk], K, rollouts,
                           starts=starts[lo:lo + chunk])
        out.extend(s.tour.length for s in sols)
    return np.array(out)


def gradient_estimates(instances, gen, merge, N: int, K: int, reps: int, seed: int,
                       baseline="pomo", selection="best") -> np.ndarray:
    """``reps`` independent gradient estimates (flattened, both policies) on a fixed batch."""
    params = list(gen.parameters()) + list(merge.parameters())
    out = []
    for rep in range(reps):
        rng = np.random.default_rng([seed, rep])
        records = rollout_batch(instances, gen, merge, N, K, rng)
        og, om, _ = batch_objectives(records, baseline, selection)
        grads = torch.autograd.grad(og + om, params, allow_unused=True)
        flat = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                          for g, p in zip(grads, params)])
        out.append(flat.detach().to(torch.float64).numpy())
    return np.stack(out)


def estimator_variance(estimates: np.ndarray) -> float:
    """Total variance: trace of the empirical covariance of the estimates."""
    return float(estimates.var(axis=0, ddof=1).sum())


def make_holdout(n: int, count: int, seed: int) -> list[Instance]:
    return generate_instances(n, count, seed)

