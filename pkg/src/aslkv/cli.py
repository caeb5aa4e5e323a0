"""Command-line front end: ``aslkv {run,replay,gen-trace,costmodel,sweep}``.

The ``ASLKV_SEED`` environment variable, when set, overrides ``--seed``.
Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import replace

import numpy as np

from aslkv.costmodel import CostModelSpec, evaluate
from aslkv.errors import AslkvError, ConfigError
from aslkv.model import ModelConfig, build_model, decode_step, random_tokens
from aslkv.policies import ASL_POLICIES, POLICIES, PruneConfig, run_policy
from aslkv.report import SIGNIFICANT_DIGITS, _round, build_report, emit_report, replay
from aslkv.trace import SyntheticTraceSpec, atomic_write, dumps_trace, gen_trace, read_trace, replay_decision, trace_from_run

log = logging.getLogger("aslkv")


def _seed(args) -> int:
    env = os.environ.get("ASLKV_SEED")
    if env is not None and env.strip():
        return int(env)
    return args.seed


def _emit(data: bytes, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(data.decode())
    else:
        atomic_write(out, data.decode())


def _prune_config(args, parser) -> PruneConfig:
    try:
        return PruneConfig(
            policy=args.policy,
            kv_budget=args.budget,
            window_size=args.window,
            kernel_size=args.kernel,
            fixed_selection_layer=args.sel,
            tau=args.tau,
            lmin=args.lmin,
            lobs=args.lobs,
            pre_selection_budget=args.pre_selection,
        )
    except ConfigError as exc:
        parser.error(str(exc))


def _add_pruning_flags(p, policy_choices=POLICIES, default_policy="asl"):
    p.add_argument("--policy", choices=policy_choices, default=default_policy)
    p.add_argument("--budget", "--k", dest="budget", type=int, default=64, help="KV budget k per layer")
    p.add_argument("--window", type=int, default=32, help="observation window W")
    p.add_argument("--kernel", type=int, default=7, help="pooling kernel width S (odd)")
    p.add_argument("--tau", type=float, default=0.3, help="relative-variance threshold")
    p.add_argument("--lmin", type=int, default=None, help="first evaluation layer (default: depth // 3)")
    p.add_argument("--lobs", type=int, default=8, help="lookback depth in layers")
    p.add_argument(
        "--pre-selection",
        choices=("budget", "full"),
        default="budget",
        help="cache policy for layers before the selection layer",
    )


def _add_output_flags(p):
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def cmd_run(args, parser) -> int:
    config = _prune_config(args, parser)
    seed = _seed(args)
    model_config = ModelConfig(
        num_layers=args.layers,
        num_q_heads=args.q_heads,
        num_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        hidden_dim=args.hidden,
        vocab_size=args.vocab,
        rng_seed=seed,
    )
    model = build_model(model_config)
    tokens = random_tokens(args.n, model_config.vocab_size, seed)
    result, metrics = run_policy(model, tokens, config)
    report = build_report(config, metrics, model_config)
    log.debug("policy %s selected layer %s", config.policy, metrics.selection_layer)
    if args.decode:
        logits, caches = result.logits, result.caches
        for _ in range(args.decode):
            logits, caches = decode_step(model, caches, int(np.argmax(logits)))
        report.extra["decode_steps"] = args.decode
        report.extra["cache_sizes_after_decode"] = [cache.size for cache in caches]
    if args.export_trace:
        if config.policy not in ASL_POLICIES:
            parser.error("--export-trace needs an adaptive policy (asl or asl_2pass)")
        atomic_write(args.export_trace, dumps_trace(trace_from_run(metrics, model_config, config)))
    _emit(emit_report(report, args.format), args.out)
    return 0


def cmd_replay(args, parser) -> int:
    trace = read_trace(args.trace)
    if args.window is None:
        args.window = trace.window_size
    if args.kernel is None:
        args.kernel = trace.metadata.get("kernel_size", 7)
    args.sel = None
    config = _prune_config(args, parser)
    _emit(emit_report(replay(trace, config), args.format), args.out)
    return 0


def cmd_gen_trace(args, parser) -> int:
    spec = SyntheticTraceSpec(
        num_layers=args.layers,
        n=args.n,
        window_size=args.window,
        uniform_until=args.uniform_until,
        localize_from=args.localize_from,
        focus_size=args.focus,
        sharpness=args.sharpness,
        noise=args.noise,
        seed=_seed(args),
    )
    _emit(dumps_trace(gen_trace(spec)).encode(), args.out)
    return 0


def cmd_costmodel(args, parser) -> int:
    spec = CostModelSpec(
        num_layers=args.L,
        select_layer=args.sel,
        n=args.n,
        k=args.k,
        head_dim=args.d,
        num_kv_heads=args.h,
        lmin=args.lmin,
        lobs=args.lobs,
        pool_width=args.w,
        union_size=args.m,
    )
    report = evaluate(spec).to_dict()
    if args.format == "json":
        data = json.dumps(_round(report), sort_keys=True, indent=2) + "\n"
    else:
        data = "metric,value\n" + "".join(f"{key},{value:.{SIGNIFICANT_DIGITS}g}\n" for key, value in report.items())
    _emit(data.encode(), args.out)
    return 0


def cmd_sweep(args, parser) -> int:
    taus = [float(t) for t in args.taus.split(",")]
    if args.trace:
        traces = [(None, read_trace(args.trace))]
    else:
        base = SyntheticTraceSpec()
        first = _seed(args)
        traces = [(s, gen_trace(replace(base, seed=s))) for s in range(first, first + args.seeds)]
    args.sel = None
    runs = []
    for seed, trace in traces:
        args.window = trace.window_size
        for tau in taus:
            args.tau = tau
            config = _prune_config(args, parser)
            decision = replay_decision(trace, config.asl_config(trace.num_layers)).decision
            runs.append(
                {"tau": tau, "seed": seed, "selection_layer": decision.selection_layer, "fallback": decision.fallback}
            )
    if args.format == "csv":
        lines = ["tau,seed,selection_layer,fallback"]
        lines += [f"{r['tau']},{'' if r['seed'] is None else r['seed']},{r['selection_layer']},{int(r['fallback'])}" for r in runs]
        data = "\n".join(lines) + "\n"
    else:
        histogram = {}
        for tau in taus:
            counts = Counter(r["selection_layer"] for r in runs if r["tau"] == tau)
            histogram[repr(tau)] = {str(layer): counts[layer] for layer in sorted(counts)}
        data = json.dumps({"runs": runs, "histogram": histogram}, sort_keys=True, indent=2) + "\n"
    _emit(data.encode(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aslkv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a policy end to end on the toy model")
    _add_pruning_flags(p)
    p.add_argument("--sel", type=int, default=None, help="fixed selection layer (fastkv, gemfilter)")
    p.add_argument("--n", type=int, default=256, help="prompt length")
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--q-heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decode", type=int, default=0, help="greedy decode steps after prefill")
    p.add_argument("--export-trace", default=None, help="write the run's score trace here")
    _add_output_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="replay a stored score trace through the selector")
    p.add_argument("--trace", required=True)
    _add_pruning_flags(p, policy_choices=ASL_POLICIES)
    p.set_defaults(window=None, kernel=None)
    _add_output_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("gen-trace", help="write a synthetic three-phase score trace")
    defaults = SyntheticTraceSpec()
    p.add_argument("--layers", type=int, default=defaults.num_layers)
    p.add_argument("--n", type=int, default=defaults.n)
    p.add_argument("--window", type=int, default=defaults.window_size)
    p.add_argument("--uniform-until", type=int, default=defaults.uniform_until)
    p.add_argument("--localize-from", type=int, default=defaults.localize_from)
    p.add_argument("--focus", type=int, default=defaults.focus_size)
    p.add_argument("--sharpness", type=float, default=defaults.sharpness)
    p.add_argument("--noise", type=float, default=defaults.noise)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("costmodel", help="closed-form TTFT/TPOT/memory ratios")
    p.add_argument("--L", "--layers", dest="L", type=int, required=True)
    p.add_argument("--sel", type=float, required=True, help="selection layer (may be fractional)")
    p.add_argument("--k", "--budget", dest="k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", "--head-dim", dest="d", type=int, default=128)
    p.add_argument("--h", "--kv-heads", dest="h", type=int, default=8)
    p.add_argument("--w", "--kernel", dest="w", type=int, default=7)
    p.add_argument("--lobs", type=int, default=8)
    p.add_argument("--lmin", type=int, default=0)
    p.add_argument("--m", type=int, default=None, help="union size (default k * lobs)")
    _add_output_flags(p)
    p.set_defaults(func=cmd_costmodel)

    p = sub.add_parser("sweep", help="selection layer over a tau grid and seeded fixtures")
    p.add_argument("--trace", default=None, help="trace file (default: seeded synthetic fixtures)")
    p.add_argument("--taus", default="0.2,0.3,0.4,0.5,0.6")
    p.add_argument("--seeds", type=int, default=1, help="number of synthetic fixtures")
    p.add_argument("--seed", type=int, default=SyntheticTraceSpec().seed, help="first fixture seed")
    _add_pruning_flags(p, policy_choices=ASL_POLICIES)
    _add_output_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, parser)
    except AslkvError as exc:
        print(f"aslkv: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"aslkv: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
