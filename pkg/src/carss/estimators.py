"""scikit-learn style wrappers around the solvers.

``X`` is anything :func:`check_instances` accepts: an :class:`Instance`, a
sequence of them, an ``(n, 2)`` array or a ``(B, n, 2)`` array. ``predict``
returns a list of :class:`Tour`; ``score`` is the negated mean tour length so
that larger is better, as scikit-learn expects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_is_fitted

from . import baselines
from .exceptions import InvalidInputError
from .policy import PolicyConfig
from .rollout import sample_start_groups, solve_batch
from .training import TrainConfig, load_policies, save_policies, train
from .tsp import Instance, Tour


def check_instances(X, name: str = "X") -> list[Instance]:
    """Normalize ``X`` to a non-empty list of :class:`Instance`."""
    if isinstance(X, Instance):
        return [X]
    if isinstance(X, (list, tuple)):
        if not X:
            raise InvalidInputError(f"{name} is empty")
        if all(isinstance(x, Instance) for x in X):
            return list(X)
        if all(np.ndim(x) == 2 for x in X):
            return [Instance(check_array(x, dtype=np.float64, input_name=name), id=f"{name}-{i}")
                    for i, x in enumerate(X)]
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        return [Instance(check_array(arr, dtype=np.float64, input_name=name), id=f"{name}-0")]
    if arr.ndim == 3 and arr.shape[0] > 0:
        return [Instance(a, id=f"{name}-{i}") for i, a in enumerate(arr)]
    raise InvalidInputError(
        f"{name} must be an instance, a list of instances, or an array of shape (n, 2) or (B, n, 2)"
    )


class _TourSolver(BaseEstimator):
    def fit(self, X=None, y=None):
        if X is not None:
            check_instances(X)
        self.is_fitted_ = True
        return self

    def _solve_one(self, inst: Instance, index: int) -> Tour:
        raise NotImplementedError

    def predict(self, X) -> list[Tour]:
        return [self._solve_one(inst, i) for i, inst in enumerate(check_instances(X))]

    def predict_lengths(self, X) -> np.ndarray:
        return np.array([t.length for t in self.predict(X)])

    def score(self, X, y=None) -> float:
        return -float(self.predict_lengths(X).mean())


class InsertionSolver(_TourSolver):
    def __init__(self, rule: str = "farthest", seed: int = 0):
        self.rule = rule
        self.seed = seed

    def _solve_one(self, inst, index):
        return baselines.insertion(inst, self.rule, np.random.default_rng([self.seed, index]))


class NearestNeighborSolver(_TourSolver):
    def __init__(self, start: int = 0):
        self.start = start

    def _solve_one(self, inst, index):
        return baselines.nearest_neighbor(inst, self.start)


class TwoOptSolver(_TourSolver):
    def __init__(self, budget=None):
        self.budget = budget

    def _solve_one(self, inst, index):
        return baselines.two_opt(inst, budget=self.budget)


class HeldKarpSolver(_TourSolver):
    def _solve_one(self, inst, index):
        return baselines.held_karp(inst)


class BruteForceSolver(_TourSolver):
    def _solve_one(self, inst, index):
        return baselines.brute_force(inst)


class CarssSolver(BaseEstimator):
    """Trainable two-phase solver.

    ``fit`` trains both policies (on uniform random instances, or on batches
    drawn from ``X`` when given). ``predict`` decodes greedily from
    ``rollouts`` random start groups per instance, merges every finished state
    from all of its endpoints and keeps the shortest tour.
    """

    def __init__(self, n_agents=2, n_nodes=20, epochs=1, batches_per_epoch=100, batch_size=32,
                 n_samples=8, lr=1e-4, baseline="pomo", return_selection="best", grad_clip=1.0,
                 policy=None, rollouts=1, seed=0):
        self.n_agents = n_agents
        self.n_nodes = n_nodes
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.batch_size = batch_size
        self.n_samples = n_samples
        self.lr = lr
        self.baseline = baseline
        self.return_selection = return_selection
        self.grad_clip = grad_clip
        self.policy = policy
        self.rollouts = rollouts
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        pol = self.policy
        if pol is None:
            pol = PolicyConfig()
        elif isinstance(pol, dict):
            pol = PolicyConfig(**pol)
        return TrainConfig(
            epochs=self.epochs, batches_per_epoch=self.batches_per_epoch,
            batch_size=self.batch_size, n_samples=self.n_samples, n_agents=self.n_agents,
            n_nodes=self.n_nodes, lr=self.lr, seed=self.seed, baseline=self.baseline,
            return_selection=self.return_selection, grad_clip=self.grad_clip, policy=pol,
        )

    def fit(self, X=None, y=None, out_dir=None):
        cfg = self._train_config()
        pool = None
        if X is not None:
            pool = check_instances(X)
            if len({inst.n for inst in pool}) != 1:
                raise InvalidInputError("training instances must all have the same size")
            cfg.n_nodes = pool[0].n
        result = train(cfg, out_dir, instance_pool=pool)
        self.gen_policy_ = result.gen_policy
        self.merge_policy_ = result.merge_policy
        self.train_log_ = result.log
        return self

    def predict(self, X) -> list[Tour]:
        check_is_fitted(self, ["gen_policy_", "merge_policy_"])
        instances = check_instances(X)
        if self.rollouts < 1:
            raise InvalidInputError("rollouts must be at least 1")
        rng = np.random.default_rng(self.seed)
        starts = [sample_start_groups(inst.n, self.n_agents, self.rollouts, rng) for inst in instances]
        out: list = [None] * len(instances)
        by_size: dict = {}
        for i, inst in enumerate(instances):
            by_size.setdefault(inst.n, []).append(i)
        for idx in by_size.values():
            sols = solve_batch(self.gen_policy_, self.merge_policy_, [instances[i] for i in idx],
                               self.n_agents, self.rollouts, starts=np.stack([starts[i] for i in idx]))
            for i, sol in zip(idx, sols):
                out[i] = sol.tour
        return out

    def predict_lengths(self, X) -> np.ndarray:
        return np.array([t.length for t in self.predict(X)])

    def score(self, X, y=None) -> float:
        return -float(self.predict_lengths(X).mean())

    def save(self, path) -> None:
        check_is_fitted(self, ["gen_policy_", "merge_policy_"])
        save_policies(path, self.gen_policy_, self.merge_policy_, self._train_config())

    @classmethod
    def load(cls, path, rollouts: int = 1, seed: int = 0) -> "CarssSolver":
        gen, merge, cfg = load_policies(path)
        est = cls(n_agents=cfg.n_agents, n_nodes=cfg.n_nodes, epochs=cfg.epochs,
                  batches_per_epoch=cfg.batches_per_epoch, batch_size=cfg.batch_size,
                  n_samples=cfg.n_samples, lr=cfg.lr, baseline=cfg.baseline,
                  return_selection=cfg.return_selection, grad_clip=cfg.grad_clip,
                  policy=cfg.policy.to_dict(), rollouts=rollouts, seed=seed)
        est.gen_policy_ = gen
        est.merge_policy_ = merge
        est.train_log_ = []
        return est


__all__ = [
    "check_instances", "InsertionSolver", "NearestNeighborSolver", "TwoOptSolver",
    "HeldKarpSolver", "BruteForceSolver", "CarssSolver", "NotFittedError",
]
