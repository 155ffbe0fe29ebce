"""Benchmark harness: per-instance CSV rows and a method-by-size summary table.

Gaps are measured against the Held-Karp optimum when ``n <= 18`` and
otherwise against the best tour any algorithm found for that instance in the
same run ("best-known-in-run").
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import HELD_KARP_MAX, canonical_name, held_karp, run_baseline
from .rollout import sample_start_groups, solve_batch
from .tsp import gap

CSV_COLUMNS = ["instance_id", "n", "K", "algo", "obj", "gap_pct", "wall_ms", "seed"]
CARSS = "carss"
REF_OPTIMAL = "held-karp"
REF_IN_RUN = "best-known-in-run"
REPORT_LABELS = {"fi": "FI", "ri": "RI", "ni": "NI", "nn": "NN", "2opt": "2-opt",
                 "held-karp": "Held-Karp", "brute-force": "Brute force"}


@dataclass
class BenchRow:
    instance_id: str
    n: int
    K: int | str
    algo: str
    obj: float
    gap_pct: float = float("nan")
    wall_ms: float = 0.0
    seed: int = 0


def parse_algos(spec: str) -> list[str]:
    out = []
    for name in spec.split(","):
        name = name.strip()
        if not name:
            continue
        key = CARSS if name.lower() == CARSS else canonical_name(name)
        if key not in out:
            out.append(key)
    return out


def _baseline_rows(algo, instances, seed, threads):
    def one(item):
        i, inst = item
        rng = np.random.default_rng([seed, i])
        res = run_baseline(algo, inst, rng)
        return BenchRow(inst.id, inst.n, "", algo, res.tour.length, wall_ms=res.wall_ms, seed=seed)

    items = list(enumerate(instances))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def _carss_rows(model, instances, K, rollouts, seed, chunk=50):
    gen, merge = model
    rng = np.random.default_rng(seed)
    by_size: dict = {}
    for i, inst in enumerate(instances):
        by_size.setdefault(inst.n, []).append(i)
    starts = {i: sample_start_groups(inst.n, K, rollouts, rng) for i, inst in enumerate(instances)}
    out = [None] * len(instances)
    for idx in by_size.values():
        for lo in range(0, len(idx), chunk):
            part = idx[lo:lo + chunk]
            t0 = time.perf_counter()
            sols = solve_batch(gen, merge, [instances[i] for i in part], K, rollouts,
                               starts=np.stack([starts[i] for i in part]))
            per = (time.perf_counter() - t0) * 1000.0 / len(part)
            for i, sol in zip(part, sols):
                inst = instances[i]
                out[i] = BenchRow(inst.id, inst.n, K, CARSS, sol.tour.length, wall_ms=per, seed=seed)
    return out


def run_bench(instances, algos, seed=0, model=None, K=2, rollouts=1, threads=1):
    """Run every algorithm on every instance and fill in gaps.

    ``model`` is a ``(gen_policy, merge_policy)`` pair, needed when ``algos``
    contains ``carss``. Rows come out grouped by algorithm in the order given,
    instances in input order.
    """
    rows: list[BenchRow] = []
    for algo in algos:
        if algo == CARSS:
            if model is None:
                raise ValueError("the carss solver needs a checkpoint")
            rows.extend(_carss_rows(model, instances, K, rollouts, seed))
        else:
            rows.extend(_baseline_rows(algo, instances, seed, threads))
    refs = {}
    for inst in instances:
        if inst.n <= HELD_KARP_MAX:
            hk = [r.obj for r in rows if r.instance_id == inst.id and r.algo == REF_OPTIMAL]
            refs[inst.id] = hk[0] if hk else held_karp(inst).length
    best: dict = {}
    for r in rows:
        best[r.instance_id] = min(best.get(r.instance_id, np.inf), r.obj)
    for r in rows:
        r.gap_pct = gap(r.obj, refs.get(r.instance_id, best[r.instance_id]))
    return rows


def reference_label(n: int) -> str:
    return REF_OPTIMAL if n <= HELD_KARP_MAX else REF_IN_RUN


def aggregate(rows) -> list[dict]:
    """Per ``(algo, n)`` means, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.algo, r.n), []).append(r)
    out = []
    for (algo, n), rs in groups.items():
        out.append({
            "algo": algo,
            "n": n,
            "K": rs[0].K,
            "count": len(rs),
            "mean_obj": float(np.mean([r.obj for r in rs])),
            "mean_gap_pct": float(np.mean([r.gap_pct for r in rs])),
            "mean_wall_ms": float(np.mean([r.wall_ms for r in rs])),
            "seed": rs[0].seed,
            "reference": reference_label(n),
        })
    return out


def format_csv(rows, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.instance_id, r.n, r.K, r.algo, repr(float(r.obj)), repr(float(r.gap_pct)),
                    repr(float(r.wall_ms)) if timing else "", r.seed])
    return buf.getvalue()


def read_csv(text: str) -> list[BenchRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(BenchRow(rec["instance_id"], int(rec["n"]), rec["K"], rec["algo"],
                             float(rec["obj"]), float(rec["gap_pct"]),
                             float(rec["wall_ms"]) if rec["wall_ms"] else 0.0, int(rec["seed"])))
    return rows


def algo_label(algo: str, K, carss_train_n=None) -> str:
    if algo == CARSS:
        return f"CARSS({carss_train_n},{K})" if carss_train_n else f"CARSS(K={K})"
    return REPORT_LABELS.get(algo, algo)


def format_report(summary, timing: bool = True, carss_train_n=None) -> str:
    """Text table: one row per algorithm, one Obj./Gap(/Time) column group per ``n``."""
    sizes = sorted({s["n"] for s in summary})
    algos = list(dict.fromkeys(s["algo"] for s in summary))
    cell = {(s["algo"], s["n"]): s for s in summary}
    sub = ["Obj.", "Gap"] + (["Time(ms)"] if timing else [])
    head1 = ["Method"] + [f"n={n}" for n in sizes for _ in sub]
    head2 = [""] + sub * len(sizes)
    body = []
    for algo in algos:
        first = next(s for s in summary if s["algo"] == algo)
        row = [algo_label(algo, first["K"], carss_train_n)]
        for n in sizes:
            s = cell.get((algo, n))
            if s is None:
                row += ["-"] * len(sub)
                continue
            row += [f"{s['mean_obj']:.2f}", f"{s['mean_gap_pct']:.2f}%"]
            if timing:
                row.append(f"{s['mean_wall_ms']:.1f}")
        body.append(row)
    table = [head1, head2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(head1))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    counts = ", ".join(f"n={n}: {next(s['count'] for s in summary if s['n'] == n)} instances, "
                       f"gap vs {reference_label(n)}" for n in sizes)
    seed = summary[0]["seed"] if summary else 0
    lines.append(f"({counts}; seed {seed})")
    return "\n".join(lines) + "\n"
