"""Acceptance criteria 1-9, one test each.

Every test records a single ``criterion N PASS|FAIL`` line (printed in the
terminal summary) before asserting, so a failing run still reports all nine.
"""

import math
import time

import numpy as np
import pytest
import torch

from carss.assignment import assign_exact, assign_heuristic
from carss.baselines import brute_force, held_karp, insertion, two_opt
from carss.bench import read_csv
from carss.cli import main
from carss.env import (
    GENERATION,
    MERGING,
    build_merge_graph,
    init_state,
    start_merging,
    step_generation,
    step_merging,
)
from carss.policy import (
    GenerationPolicy,
    MergePolicy,
    PolicyConfig,
    encode_merge_graph,
    gen_act,
    gen_distribution,
    lowest_index_padding,
    merge_act,
    merge_distribution,
    random_padding,
    start_episode,
    update_memory,
)
from carss.training import (
    TrainConfig,
    batch_objectives,
    build_policies,
    estimator_variance,
    evaluate,
    gradient_estimates,
    make_holdout,
    replay_batch,
    rollout_batch,
    train,
)
from carss.tsp import generate_instances

from conftest import ACCEPTANCE_LINES
from helpers import check_rollout, directional_fd_errors, flat_params

TOY_INI = """[train]
n_nodes = 12
n_agents = 2
batches_per_epoch = 3
batch_size = 4
n_samples = 2
lr = 0.001
seed = 5

[policy]
d_model = 8
d_ff = 16
n_heads = 2
"""


def verdict(number, title, ok, detail):
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def single_thread():
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(before)


def test_criterion_1_oracle_agreement():
    t0 = time.perf_counter()
    insts = generate_instances(9, 50, 101)
    diffs = [abs(brute_force(i).length - held_karp(i).length) for i in insts]
    elapsed = time.perf_counter() - t0
    ok = max(diffs) <= 1e-9 and elapsed < 10
    verdict(1, "brute force vs Held-Karp", ok,
            f"50 instances n=9, max |diff| {max(diffs):.1e} (<= 1e-9), {elapsed:.2f}s (< 10s)")


def test_criterion_2_heuristic_reference_means():
    t0 = time.perf_counter()
    insts = generate_instances(100, 100, 2024)
    means = {}
    for label, rule in (("FI", "farthest"), ("RI", "random"), ("NI", "nearest")):
        means[label] = float(np.mean([insertion(inst, rule, np.random.default_rng([0, i])).length
                                      for i, inst in enumerate(insts)]))
    means["2-opt"] = float(np.mean([two_opt(inst).length for inst in insts]))
    elapsed = time.perf_counter() - t0
    targets = {"FI": 8.34, "RI": 8.51, "NI": 9.45}
    within = all(abs(means[k] - v) <= 0.03 * v for k, v in targets.items())
    ordered = means["FI"] <= means["RI"] <= means["NI"]
    two = 8.0 <= means["2-opt"] <= 8.7
    ok = within and ordered and two and elapsed < 120
    detail = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    verdict(2, "insertion and 2-opt reference means", ok,
            f"{detail}; targets 8.34/8.51/9.45 +-3%, 2-opt in [8.0, 8.7], order FI<=RI<=NI {ordered}, "
            f"{elapsed:.1f}s (< 120s)")


def test_criterion_3_environment_invariants():
    rng = np.random.default_rng(303)
    failures = []
    t0 = time.perf_counter()
    for trial in range(1000):
        n = int(rng.integers(10, 61))
        K = min(int(rng.integers(2, 7)), n // 2)
        inst = generate_instances(n, 1, int(rng.integers(2**32)))[0]
        try:
            check_rollout(inst, K, rng)
        except AssertionError as exc:
            failures.append((trial, n, K, str(exc)))
    elapsed = time.perf_counter() - t0
    verdict(3, "environment invariants", not failures,
            f"1000 fuzzed rollouts n in [10,60], K in [2,6], {len(failures)} violations, {elapsed:.1f}s")


def _assignment_state(rng, n, K):
    perm = rng.permutation(n)
    n_visited = K + int(rng.integers(0, n - 2 * K + 1))
    groups = np.array_split(perm[:n_visited], K)
    return [(int(g[0]), int(g[-1])) for g in groups], perm[:n_visited]


def _constraints_hold(a, n, visited):
    unvisited = np.setdiff1d(np.arange(n), visited)
    x = a.x
    return bool((x[unvisited].sum(axis=1) == 1).all() and (x.sum(axis=0) >= 1).all()
                and (x[visited].sum() == 0))


def test_criterion_4_assignment():
    rng = np.random.default_rng(404)
    bad = 0
    for _ in range(500):
        n = int(rng.integers(6, 80))
        K = int(rng.integers(2, min(6, n // 2) + 1))
        inst = generate_instances(n, 1, int(rng.integers(2**32)))[0]
        endpoints, visited = _assignment_state(rng, n, K)
        a = assign_heuristic(inst, endpoints, visited)
        b = assign_heuristic(inst, endpoints, visited)
        if not _constraints_hold(a, n, visited) or a.agent_of.tolist() != b.agent_of.tolist():
            bad += 1
    worse = 0
    for _ in range(200):
        K = int(rng.integers(2, 4))
        m = int(rng.integers(K, 11))
        n = m + K + int(rng.integers(0, 4))
        inst = generate_instances(n, 1, int(rng.integers(2**32)))[0]
        perm = rng.permutation(n)
        visited = perm[: n - m]
        groups = np.array_split(visited, K)
        endpoints = [(int(g[0]), int(g[-1])) for g in groups]
        h = assign_heuristic(inst, endpoints, visited)
        e = assign_exact(inst, endpoints, visited)
        if h.objective < e.objective - 1e-12 or not _constraints_hold(e, n, visited):
            worse += 1
    verdict(4, "assignment heuristic", bad == 0 and worse == 0,
            f"500 fuzzed states, {bad} constraint/determinism violations; "
            f"200 enumerable cases, {worse} with heuristic < exact")


def test_criterion_5_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = PolicyConfig(d_model=8, d_ff=16, n_heads=2)
    gen = GenerationPolicy(cfg, seed=50).double()
    merge = MergePolicy(cfg, seed=51).double()
    insts = generate_instances(12, 1, 505)
    records = rollout_batch(insts, gen, merge, 2, 2, np.random.default_rng(5))

    def objective():
        og, om, _ = batch_objectives(replay_batch(insts, gen, merge, records))
        return og + om

    errs = directional_fd_errors(objective, flat_params([gen, merge]), 20, seed=5)
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-5 and elapsed < 60
    verdict(5, "surrogate gradient vs finite differences", ok,
            f"n=12 K=2 d=8 N=2 float64, 20 probes, max rel err {max(errs):.2e} (< 1e-5), {elapsed:.1f}s")


def test_criterion_6_distribution_properties():
    cfg = PolicyConfig()
    gen, merge = GenerationPolicy(cfg, seed=60), MergePolicy(cfg, seed=61)
    rng = np.random.default_rng(606)
    worst_sum, worst_pad, nonzero_masked, evals, repadded = 0.0, 0.0, 0, 0, 0
    with torch.no_grad():
        while evals < 200:
            n = int(rng.integers(10, 41))
            K = min(int(rng.integers(2, 6)), n // 2)
            inst = generate_instances(n, 1, int(rng.integers(2**32)))[0]
            s = init_state(inst, K, rng.choice(n, K, replace=False))
            cache = start_episode(gen, s)
            while s.phase == GENERATION:
                base = gen_distribution(s, None, cache, gen, pad=lowest_index_padding)
                other = gen_distribution(s, None, cache, gen, pad=random_padding, rng=rng)
                p = base.probs.astype(np.float64)
                worst_sum = max(worst_sum, float(np.abs(p.sum(axis=1) - 1).max()))
                nonzero_masked += int((p[~base.mask] != 0).sum())
                worst_pad = max(worst_pad, float(np.abs(other.probs - base.probs).max()))
                repadded += int(not np.array_equal(other.slots, base.slots))
                evals += 1
                actions, _ = gen_act(base, "sample", rng)
                step_generation(s, actions)
                update_memory(cache, actions)
            g = build_merge_graph(s)
            H = encode_merge_graph(merge, g, inst)
            ms = start_merging(s, g, int(rng.integers(g.size)))
            while ms.phase == MERGING and not ms.is_final_step:
                dist = merge_distribution(ms, H, merge)
                p = dist.probs.astype(np.float64)
                worst_sum = max(worst_sum, abs(p.sum() - 1))
                nonzero_masked += int((p[~dist.mask] != 0).sum())
                evals += 1
                action, _ = merge_act(dist, "sample", rng)
                step_merging(ms, action)
    ok = worst_sum <= 1e-6 and nonzero_masked == 0 and worst_pad <= 1e-6 and repadded > 0
    verdict(6, "distribution properties", ok,
            f"{evals} evaluations, max |sum-1| {worst_sum:.1e}, {nonzero_masked} nonzero masked entries, "
            f"padding max diff {worst_pad:.1e} over {repadded} re-padded states")


@pytest.mark.slow
def test_criterion_7_training_smoke():
    t0 = time.perf_counter()
    cfg = TrainConfig(batches_per_epoch=200, batch_size=32, n_samples=8, n_nodes=20, n_agents=2,
                      lr=1e-3, seed=0, policy=PolicyConfig(d_model=16, d_ff=32, n_heads=2))
    holdout = make_holdout(20, 100, 12345)
    g0, m0 = build_policies(cfg)
    before = float(evaluate(g0, m0, holdout, 2, seed=7).mean())
    result = train(cfg)
    after = float(evaluate(result.gen_policy, result.merge_policy, holdout, 2, seed=7).mean())
    improvement = (before - after) / before * 100
    batch = generate_instances(20, 8, 777)
    var = {}
    for mode in ("pomo", "none"):
        est = gradient_estimates(batch, g0, m0, 8, 2, 50, seed=31, baseline=mode)
        var[mode] = estimator_variance(est)
    elapsed = time.perf_counter() - t0
    ok = improvement >= 3.0 and var["pomo"] < var["none"] and elapsed < 1800
    verdict(7, "toy training smoke", ok,
            f"greedy holdout length {before:.4f} -> {after:.4f} ({improvement:.1f}% >= 3%); "
            f"gradient variance pomo {var['pomo']:.3e} < none {var['none']:.3e}; {elapsed:.0f}s")


def _run_twice(tmp_path, make_args):
    outs = []
    for tag in ("a", "b"):
        args = make_args(tmp_path / tag)
        assert main(args) == 0, args
        outs.append(tmp_path / tag)
    return outs


def _same_bytes(a, b):
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return files_a == files_b and bool(files_a) and all(
        (a / f).read_bytes() == (b / f).read_bytes() for f in files_a)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    (root / "toy.ini").write_text(TOY_INI)
    runs = _run_twice(root, lambda d: ["train", "--config", str(root / "toy.ini"),
                                       "--out", str(d / "train"), "--no-timing"])
    return root, runs


def test_criterion_8_determinism(toy_runs, tmp_path, capsys):
    root, (ta, tb) = toy_runs
    checks = {}
    gen = _run_twice(tmp_path, lambda d: ["generate", "--n", "30", "--count", "5", "--seed", "8",
                                          "--out", str(d / "inst")])
    checks["instance sets"] = _same_bytes(gen[0] / "inst", gen[1] / "inst")
    checks["training logs and checkpoints"] = _same_bytes(ta / "train", tb / "train")
    ckpt = ta / "train" / "checkpoint.ckpt"
    traces = _run_twice(tmp_path, lambda d: ["solve", "--algo", "carss", "--checkpoint", str(ckpt),
                                             "--instances", str(gen[0] / "inst"), "--rollouts", "2",
                                             "--trace-dir", str(d / "traces"), "--no-timing",
                                             "--seed", "3", "--out", str(d / "traces" / "solve.csv")])
    checks["rollout traces"] = _same_bytes(traces[0] / "traces", traces[1] / "traces")
    bench = _run_twice(tmp_path, lambda d: ["bench", "--algos", "carss,fi,ri,ni,2opt", "--n", "12,16",
                                            "--count", "4", "--checkpoint", str(ckpt), "--seed", "4",
                                            "--no-timing", "--out", str(d / "bench")])
    checks["bench CSVs"] = _same_bytes(bench[0] / "bench", bench[1] / "bench")
    capsys.readouterr()
    verdict(8, "end-to-end determinism", all(checks.values()),
            ", ".join(f"{k} {'identical' if v else 'DIFFER'}" for k, v in checks.items()))


def test_criterion_9_bench_report_from_toy_checkpoint(toy_runs, tmp_path, capsys):
    root, (ta, _) = toy_runs
    ckpt = ta / "train" / "checkpoint.ckpt"
    code = main(["bench", "--algos", "fi,ri,ni,2opt,carss", "--n", "12,20", "--count", "5",
                 "--checkpoint", str(ckpt), "--out", str(tmp_path / "bench")])
    report = (tmp_path / "bench" / "report.txt").read_text()
    printed = capsys.readouterr().out
    rows = read_csv((tmp_path / "bench" / "bench.csv").read_text())
    lines = report.splitlines()
    labels = [ln.split()[0] for ln in lines[2:-1]]
    ok = (code == 0 and printed == report and labels == ["FI", "RI", "NI", "2-opt", "CARSS(12,2)"]
          and "n=12" in lines[0] and "n=20" in lines[0] and "Obj." in lines[1] and "Gap" in lines[1]
          and len(rows) == 5 * 10 and all(math.isfinite(r.gap_pct) for r in rows))
    verdict(9, "bench report from toy checkpoint", ok,
            f"exit {code}, rows {labels}, {len(rows)} CSV rows")
