"""Command-line surface: run/compare attention, benchmarks, index snapshots.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.
Every random choice flows from --seed, so repeated invocations with the
same flags reproduce every non-timing output field byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, tensorfile
from .core import MaskKind, ValidationError, vanilla_attention
from .dci import DciIndex, QuerySpec, load_snapshot
from .embed import EmbeddingContext, choose_c, embed_keys
from .sparse import AdaptiveK, SparseAttentionConfig, causal_attention, sparse_attention
from ._engine import set_thread_budget

__all__ = ["main", "cli_dispatch", "UsageError"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3

DEFAULT_GRID = "2,2,600,1500;2,2,800,2000;2,3,600,1500;10,2,100,1000"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_workload_flags(sub):
    sub.add_argument("--input", help="read the problem from a tensor file")
    sub.add_argument("--n", type=int, default=256, help="number of queries")
    sub.add_argument("--m", type=int, default=256, help="number of keys/values")
    sub.add_argument("--d", type=int, default=32, help="key/query dimension")
    sub.add_argument("--dv", type=int, default=32, help="value dimension")
    sub.add_argument(
        "--workload", choices=["gaussian", "clustered"], default="gaussian"
    )
    sub.add_argument("--clusters", type=int, default=None)
    sub.add_argument("--spread", type=float, default=0.25)


def _add_common_flags(sub, k_is_list=False):
    if k_is_list:
        sub.add_argument("--k", default="3,5,8,10", help="comma-separated k sweep")
    else:
        sub.add_argument("--k", type=int, default=10, help="keys retrieved per query")
    sub.add_argument("--k0", type=int, default=None, help="candidates per composite")
    sub.add_argument("--k1", type=int, default=None, help="visits per composite")
    sub.add_argument("--num-simple", type=int, default=2, dest="num_simple")
    sub.add_argument("--num-composite", type=int, default=2, dest="num_composite")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--causal", action="store_true")
    sub.add_argument("--threads", type=int, default=bench.DEFAULT_THREADS)
    sub.add_argument("--precision", choices=["f32", "f64"], default="f32")
    sub.add_argument("--alpha", type=float, default=None, help="enable adaptive k")
    sub.add_argument("--out", default=None)
    sub.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")


def build_parser() -> _Parser:
    parser = _Parser(prog="knnattn", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="compute attention, write output tensors")
    run.add_argument("--method", choices=["sparse", "vanilla"], default="sparse")
    _add_workload_flags(run)
    _add_common_flags(run)

    cmp_ = subs.add_parser("compare", help="sparse vs exact attention report")
    _add_workload_flags(cmp_)
    _add_common_flags(cmp_)

    knn = subs.add_parser("bench-knn", help="recall/latency frontier vs brute force")
    knn.add_argument("--points", type=int, default=10000)
    knn.add_argument("--dim", type=int, default=64)
    knn.add_argument("--queries", type=int, default=1000)
    knn.add_argument("--grid", default=DEFAULT_GRID, help="p,L,k0,k1[;p,L,k0,k1...]")
    knn.add_argument("--clusters", type=int, default=None, help="clustered points")
    knn.add_argument("--spread", type=float, default=0.25)
    knn.add_argument("--normalize", action="store_true", help="unit-normalize points")
    knn.add_argument(
        "--preset",
        choices=["none", "large"],
        default="none",
        help="large: 60000 points x 784 dims, 10000 queries, top-10",
    )
    knn.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    _add_common_flags(knn)

    attn = subs.add_parser("bench-attn", help="speed/accuracy sweep over k")
    attn.add_argument("--heads", type=int, default=1)
    attn.add_argument("--reps", type=int, default=bench.DEFAULT_REPS)
    _add_workload_flags(attn)
    _add_common_flags(attn, k_is_list=True)

    dump = subs.add_parser("index-dump", help="build an index and snapshot it")
    _add_workload_flags(dump)
    _add_common_flags(dump)

    load = subs.add_parser("index-load", help="parse a snapshot and summarize it")
    load.add_argument("--input", required=True)

    return parser


def _check_positive(args, names):
    for name in names:
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {value}")


def _parse_k_list(text) -> list[int]:
    try:
        ks = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad k list {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"k values must be positive, got {text!r}")
    return ks


def _workload_from_args(args, mask_kind) -> bench.Workload:
    return bench.Workload(
        kind=(
            bench.WorkloadKind.CLUSTERED_MIXTURE
            if args.workload == "clustered"
            else bench.WorkloadKind.GAUSSIAN_IID
        ),
        n=args.n,
        m=args.m,
        d=args.d,
        d_v=args.dv,
        mask_kind=mask_kind,
        seed=args.seed,
        cluster_count=args.clusters,
        spread=args.spread,
        precision=args.precision,
    )


def _load_or_generate(args):
    if args.input:
        return tensorfile.load_problem(args.input)
    mask_kind = MaskKind.CAUSAL if args.causal else MaskKind.NONE
    if args.causal and args.n != args.m:
        raise UsageError(f"--causal needs --n == --m, got {args.n} != {args.m}")
    return bench.gen_workload(_workload_from_args(args, mask_kind))


def _sparse_config(args, k=None) -> SparseAttentionConfig:
    k = args.k if k is None else k
    k0, k1 = bench.default_budgets(k)
    if args.k0 is not None:
        k0 = args.k0
    if args.k1 is not None:
        k1 = args.k1
    adaptive = None
    if args.alpha is not None:
        adaptive = AdaptiveK(alpha=args.alpha)
    return SparseAttentionConfig(
        spec=QuerySpec(k, k0, k1),
        p=args.num_simple,
        L=args.num_composite,
        seed=args.seed,
        adaptive=adaptive,
    )


def _emit(rows: list[dict], args) -> None:
    if args.out:
        if args.format == "csv":
            bench.write_csv(rows, args.out)
        else:
            bench.write_jsonl(rows, args.out)
    else:
        for row in rows:
            print(json.dumps(row, sort_keys=True))


def _cmd_run(args) -> int:
    _check_positive(args, ["k", "k0", "k1", "num_simple", "num_composite", "threads", "n", "m", "d", "dv"])
    if not args.out:
        raise UsageError("run needs --out for the output tensor file")
    set_thread_budget(args.threads)
    problem = _load_or_generate(args)
    if args.method == "vanilla":
        output = vanilla_attention(problem)
    elif problem.mask.kind is MaskKind.CAUSAL:
        output = causal_attention(problem, _sparse_config(args)).output
    else:
        output = sparse_attention(problem, _sparse_config(args)).output
    tensorfile.save_output(args.out, output)
    print(
        f"wrote {output.shape[0]}x{output.shape[1]} output "
        f"({args.method}) to {args.out}"
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    _check_positive(args, ["k", "k0", "k1", "num_simple", "num_composite", "threads", "n", "m", "d", "dv"])
    problem = _load_or_generate(args)
    config = _sparse_config(args)
    k, k0, k1 = config.budgets(problem.m)
    reports = bench.run_attn_sweep(
        problem,
        [k],
        p=args.num_simple,
        L=args.num_composite,
        seed=args.seed,
        k0=k0,
        k1=k1,
        threads=args.threads,
    )
    _emit([r.to_dict() for r in reports], args)
    return EXIT_OK


def _cmd_bench_knn(args) -> int:
    _check_positive(args, ["k", "points", "dim", "queries", "threads", "reps"])
    set_thread_budget(args.threads)
    if args.preset == "large":
        params = dict(bench.LARGE_PRESET)
    else:
        params = dict(m_points=args.points, d=args.dim, k=args.k, n_queries=args.queries)
    grid = []
    try:
        for part in args.grid.split(";"):
            p, L, k0, k1 = (int(tok) for tok in part.split(","))
            grid.append(bench.KnnSetting(p, L, k0, k1))
    except ValueError as exc:
        raise UsageError(f"bad --grid {args.grid!r}") from exc
    dtype = np.float32 if args.precision == "f32" else np.float64
    results = bench.run_knn_bench(
        grid=grid, seed=args.seed, reps=args.reps, dtype=dtype,
        clusters=args.clusters, spread=args.spread, normalize=args.normalize,
        **params,
    )
    _emit([r.to_dict() for r in results], args)
    return EXIT_OK


def _cmd_bench_attn(args) -> int:
    _check_positive(args, ["k0", "k1", "num_simple", "num_composite", "threads", "n", "m", "d", "dv", "heads", "reps"])
    if args.alpha is not None:
        raise UsageError("--alpha conflicts with a fixed --k sweep")
    ks = _parse_k_list(args.k)
    if args.input:
        if args.heads != 1:
            raise UsageError("--input provides a single head; drop --heads")
        problems = [tensorfile.load_problem(args.input)]
    else:
        mask_kind = MaskKind.CAUSAL if args.causal else MaskKind.NONE
        if args.causal and args.n != args.m:
            raise UsageError(f"--causal needs --n == --m, got {args.n} != {args.m}")
        workload = _workload_from_args(args, mask_kind)
        problems = bench.head_problems(workload, args.heads)
    reports = bench.run_attn_sweep(
        problems,
        ks,
        p=args.num_simple,
        L=args.num_composite,
        seed=args.seed,
        k0=args.k0,
        k1=args.k1,
        reps=args.reps,
        threads=args.threads,
    )
    _emit([r.to_dict() for r in reports], args)
    return EXIT_OK


def _cmd_index_dump(args) -> int:
    _check_positive(args, ["num_simple", "num_composite", "n", "m", "d", "dv"])
    if not args.out:
        raise UsageError("index-dump needs --out for the snapshot path")
    problem = _load_or_generate(args)
    keys64 = problem.keys.astype(np.float64)
    ctx = EmbeddingContext(c=choose_c(keys64), d=problem.d)
    points = embed_keys(keys64, ctx)
    index = DciIndex.construct(points, args.num_simple, args.num_composite, args.seed)
    index.save_snapshot(args.out)
    print(
        f"snapshot: p={index.num_simple} L={index.num_composite} "
        f"dim={index.dim} points={len(index)} -> {args.out}"
    )
    return EXIT_OK


def _cmd_index_load(args) -> int:
    snap = load_snapshot(args.input)
    print(
        f"snapshot: p={snap.num_simple} L={snap.num_composite} "
        f"dim={snap.dim} points={snap.count} "
        f"simple_indices={len(snap.projections)}"
    )
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "bench-knn": _cmd_bench_knn,
    "bench-attn": _cmd_bench_attn,
    "index-dump": _cmd_index_dump,
    "index-load": _cmd_index_load,
}


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help path
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tensorfile.ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
