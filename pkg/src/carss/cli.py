"""``carss`` command line: generate, train, solve, bench, render, describe.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .baselines import canonical_name
from .bench import CARSS, aggregate, format_csv, format_report, parse_algos, run_bench
from .env import isolated_count, merge_graph_size, t_prime
from .exceptions import CarssError, FormatError, InvalidConfigError, InvalidInputError
from .policy import policy_summary
from .rollout import sample_start_groups, solve_batch
from .trace import build_trace, read_trace, render_svg, write_trace
from .training import load_config, load_policies, train
from .tsp import generate_instances, read_instance_set, write_instance_set

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_or_print(text, path):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _instances(args):
    if getattr(args, "instances", None):
        return read_instance_set(args.instances)
    if not args.n:
        raise UsageError("give --instances or --n")
    sizes = args.n if isinstance(args.n, list) else [args.n]
    out = []
    for n in sizes:
        out.extend(generate_instances(n, args.count, args.seed))
    return out


def _load_model(args):
    if not args.checkpoint:
        raise UsageError("the carss solver needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    gen, merge, cfg = load_policies(path)
    K = args.K if args.K else cfg.n_agents
    return gen, merge, cfg, K


def cmd_generate(args):
    if args.out is None:
        raise UsageError("generate needs --out DIR")
    insts = generate_instances(args.n, args.count, args.seed)
    paths = write_instance_set(insts, args.out)
    print(f"wrote {len(paths)} instances to {args.out}")


def cmd_train(args):
    if args.out is None:
        raise UsageError("train needs --out DIR")
    overrides = {
        "epochs": args.epochs, "batches_per_epoch": args.batches, "batch_size": args.batch_size,
        "n_samples": args.samples, "n_agents": args.K, "n_nodes": args.n, "lr": args.lr,
        "baseline": args.baseline, "return_selection": args.return_selection,
        "checkpoint_every": args.checkpoint_every, "dtype": args.dtype, "d_model": args.d_model,
        "seed": args.seed,
    }
    cfg = load_config(args.config, overrides)

    def progress(row):
        if args.verbose:
            print(f"batch {row['batch']}: mean_return={row['mean_return']:.4f}", file=sys.stderr)

    result = train(cfg, args.out, progress=progress, log_timing=not args.no_timing)
    last = result.log[-1]["mean_return"] if result.log else float("nan")
    print(f"trained {len(result.log)} batches; final mean return {last:.4f}; "
          f"checkpoint at {Path(args.out) / 'checkpoint.ckpt'}")


def cmd_solve(args):
    try:
        algo = CARSS if args.algo.lower() == CARSS else canonical_name(args.algo)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    instances = _instances(args)
    if algo == CARSS:
        gen, merge, _, K = _load_model(args)
        rows = run_bench(instances, [CARSS], args.seed, (gen, merge), K, args.rollouts)
        if args.trace_dir:
            tdir = Path(args.trace_dir)
            tdir.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng(args.seed)
            for inst in instances:
                starts = sample_start_groups(inst.n, K, args.rollouts, rng)[None]
                sol = solve_batch(gen, merge, [inst], K, args.rollouts, starts=starts)[0]
                write_trace(build_trace(sol), tdir / f"{inst.id}.jsonl")
    else:
        rows = run_bench(instances, [algo], args.seed, threads=args.threads)
    _write_or_print(format_csv(rows, timing=not args.no_timing), args.out)


def cmd_bench(args):
    try:
        algos = parse_algos(args.algos)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    instances = _instances(args)
    model, K, train_n = None, args.K or 2, None
    if CARSS in algos:
        gen, merge, cfg, K = _load_model(args)
        model, train_n = (gen, merge), cfg.n_nodes
    rows = run_bench(instances, algos, args.seed, model, K, args.rollouts, args.threads)
    timing = not args.no_timing
    report = format_report(aggregate(rows), timing=timing, carss_train_n=train_n)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(format_csv(rows, timing=timing))
        (out / "report.txt").write_text(report)
    sys.stdout.write(report)


def cmd_render(args):
    records = read_trace(args.trace)
    _write_or_print(render_svg(records, size=args.size), args.out)


def cmd_describe(args):
    if args.checkpoint:
        gen, merge, cfg, _ = _load_model(args)
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        print(policy_summary(gen, merge))
        return
    instances = _instances(args)
    K = args.K or 2
    for inst in instances:
        line = f"{inst.id}: n={inst.n}"
        if 2 <= K <= inst.n // 2:
            line += (f" K={K} T'={t_prime(inst.n, K)} |I|={isolated_count(inst.n, K)}"
                     f" merge_graph={merge_graph_size(inst.n, K)}")
        print(line + ("" if inst.in_unit_square else " (outside unit square)"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--config", default=None, help="INI file with [train] and [policy] sections")

    parser = argparse.ArgumentParser(prog="carss", description="Multi-agent subpath TSP solver and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write uniform random instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train both policies")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int, help="batches per epoch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--samples", type=int, help="POMO rollouts per instance (N)")
    p.add_argument("--K", type=int, help="number of agents")
    p.add_argument("--n", type=int, help="instance size")
    p.add_argument("--lr", type=float)
    p.add_argument("--baseline", choices=["pomo", "none"])
    p.add_argument("--return-selection", choices=["best", "paper-literal-min"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--d-model", type=int)
    p.add_argument("--no-timing", action="store_true", help="leave wall_ms blank in the log")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("solve", cmd_solve, "run one solver, per-instance CSV"),
                                 ("bench", cmd_bench, "run several solvers, summary table")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "solve":
            p.add_argument("--algo", required=True, help="carss, fi, ri, ni, nn, 2opt, held-karp, brute-force")
            p.add_argument("--n", type=int)
            p.add_argument("--trace-dir", help="write one JSONL trace per instance (carss only)")
        else:
            p.add_argument("--algos", default="fi,ri,ni,2opt")
            p.add_argument("--n", type=_int_list, default=None, help="comma-separated sizes")
        p.add_argument("--count", type=int, default=100)
        p.add_argument("--instances", help="instance file or directory instead of generating")
        p.add_argument("--checkpoint")
        p.add_argument("--K", type=int, help="agents for carss (default: from checkpoint)")
        p.add_argument("--rollouts", type=int, default=1, help="random start groups per instance")
        p.add_argument("--no-timing", action="store_true", help="leave wall_ms blank")
        p.set_defaults(func=func)

    p = sub.add_parser("render", parents=[common], help="SVG of a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--size", type=int, default=600)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("describe", parents=[common], help="summarize a checkpoint or instances")
    p.add_argument("--checkpoint")
    p.add_argument("--instances")
    p.add_argument("--n", type=int)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--K", type=int)
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.threads < 1:
        print("carss: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is None and args.command != "train":
        args.seed = 0
    torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"carss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, FormatError, InvalidInputError) as exc:
        print(f"carss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CarssError, RuntimeError, ValueError) as exc:
        print(f"carss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
