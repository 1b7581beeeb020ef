"""Command-line interface.

Stages write their artifacts into the output directory (default
runs/default): target.spxw, draft.spxw, predictors.spxp, profile.spxs,
report.json.  `--config` points at a JSON file overriding any subset of
the default configuration; `--seed` reseeds every stage from one value.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .engine import (EngineConfig, ExitEngine, NeverExitPolicy, OraclePolicy, PredictorPolicy,
                     greedy_generate, write_trace)
from .metrics import BenchReport
from .model import load_weights
from .pipeline import Pipeline, load_config
from .predictor import load_predictors
from .scheduler import ScheduleConfig, load_profile, weight_fingerprint
from .tree import TreeEngine


def _build_parser():
    parser = argparse.ArgumentParser(prog="specexit",
                                     description="speculative early-exit inference engine")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="reseed all stages from one u64")
    common.add_argument("--out", type=Path, default=None, help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-model", parents=[common], help="train the target model")
    sub.add_parser("train-draft", parents=[common], help="train the draft model")
    sub.add_parser("train-predictors", parents=[common], help="train per-layer exit predictors")
    sub.add_parser("profile", parents=[common], help="build the offline exit-frequency profile")
    sub.add_parser("bench", parents=[common], help="run the full benchmark")
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")

    gen = sub.add_parser("generate", parents=[common], help="generate with early exiting")
    gen.add_argument("--prompt", required=True, help="prompt text (latin-1 bytes)")
    gen.add_argument("--max-new", type=int, default=64)
    gen.add_argument("--mode", choices=["all", "two-level"], default="two-level")
    gen.add_argument("--policy", choices=["predictor", "never", "oracle"], default="predictor")
    gen.add_argument("--trace", type=Path, default=None, help="write a JSON-lines exit trace")

    tre = sub.add_parser("tree-generate", parents=[common],
                         help="tree speculative decoding with hyper-token exits")
    tre.add_argument("--prompt", required=True)
    tre.add_argument("--max-new", type=int, default=64)
    tre.add_argument("--mode", choices=["all", "two-level"], default="all")
    tre.add_argument("--branching", default="3,2", help="comma-separated per-depth widths")

    orc = sub.add_parser("oracle", parents=[common],
                         help="per-token theoretical earliest exit layers")
    orc.add_argument("--prompt", required=True)
    orc.add_argument("--max-new", type=int, default=64)

    ins = sub.add_parser("inspect", parents=[common], help="describe an artifact file")
    ins.add_argument("path", type=Path)

    bk = sub.add_parser("bench-kernels", parents=[common],
                        help="compare the compiled and pure-Python kernel backends")
    bk.add_argument("--size", type=int, default=96)
    bk.add_argument("--repeat", type=int, default=5)
    return parser


def _pipeline(args) -> Pipeline:
    return Pipeline(load_config(args.config, args.seed, args.out))


def _load_engine_parts(pipe: Pipeline, mode: str):
    target = load_weights(pipe.out / "target.spxw")
    draft = load_weights(pipe.out / "draft.spxw")
    bank = load_predictors(pipe.out / "predictors.spxp")
    profile = None
    if mode == "two-level":
        profile = load_profile(pipe.out / "profile.spxs",
                               expect_fingerprint=weight_fingerprint(pipe.out / "target.spxw"))
    sc = pipe.cfg["schedule"]
    # clip to the model at hand so a generic config works for small models
    top_k = min(sc["offline_top_k"], target.config.num_layers - 1)
    sched = ScheduleConfig(queue_len=sc["queue_len"], radius=sc["radius"],
                           offline_top_k=top_k)
    econf = EngineConfig(k=pipe.cfg["predictors"]["k"],
                         threshold=pipe.cfg["predictors"]["threshold"], schedule_mode=mode)
    return target, draft, bank, profile, sched, econf


def _prompt_bytes(text: str):
    return [b for b in text.encode("latin-1", errors="replace")]


def _decode(tokens):
    return bytes(int(t) & 0xFF for t in tokens).decode("latin-1", errors="replace")


def cmd_generate(args):
    pipe = _pipeline(args)
    target, draft, bank, profile, sched, econf = _load_engine_parts(pipe, args.mode)
    if args.policy == "predictor":
        policy = PredictorPolicy(bank)
    elif args.policy == "oracle":
        policy = OraclePolicy(target)
    else:
        policy = NeverExitPolicy()
    engine = ExitEngine(target, draft, policy, econf, profile=profile, schedule_config=sched)
    t0 = time.perf_counter()
    tokens, trace = engine.generate(_prompt_bytes(args.prompt), args.max_new)
    dt = time.perf_counter() - t0
    if args.trace:
        write_trace(trace, args.trace)
    print(_decode(tokens))
    avg = float(np.mean([r.exit_layer for r in trace]))
    print(f"[{len(tokens)} tokens, avg exit layer {avg:.2f}, "
          f"{len(tokens) / dt:.1f} tok/s, mode={args.mode}]", file=sys.stderr)


def cmd_tree_generate(args):
    pipe = _pipeline(args)
    target, draft, bank, profile, sched, econf = _load_engine_parts(pipe, args.mode)
    branching = tuple(int(b) for b in args.branching.split(","))
    engine = TreeEngine(target, draft, PredictorPolicy(bank), branching, econf,
                        profile=profile, schedule_config=sched)
    t0 = time.perf_counter()
    tokens, steps = engine.generate(_prompt_bytes(args.prompt), args.max_new)
    dt = time.perf_counter() - t0
    print(_decode(tokens))
    accepted = sum(len(s.accepted_tokens) for s in steps)
    avg_exit = float(np.mean([s.path_exit_layers[s.accepted_path] for s in steps]))
    print(f"[{len(tokens)} tokens in {len(steps)} tree steps "
          f"({accepted} draft tokens accepted), avg committed-path exit layer "
          f"{avg_exit:.2f}, {len(tokens) / dt:.1f} tok/s]", file=sys.stderr)


def cmd_oracle(args):
    pipe = _pipeline(args)
    target = load_weights(pipe.out / "target.spxw")
    tokens, layers = greedy_generate(target, _prompt_bytes(args.prompt), args.max_new)
    print(_decode(tokens))
    print(f"oracle exit layers: {layers}", file=sys.stderr)
    print(f"avg {float(np.mean(layers)):.2f} of {target.config.num_layers - 1} "
          "(final layer index)", file=sys.stderr)


def cmd_inspect(args):
    path = args.path
    if not path.exists():
        raise FileNotFoundError(path)
    magic = path.open("rb").read(4)
    if magic == b"SPXW":
        model = load_weights(path)
        c = model.config
        print(f"weight file: {path}")
        print(f"  vocab {c.vocab_size}  hidden {c.hidden_dim}  layers {c.num_layers}  "
              f"heads {c.num_heads}  ffn {c.ffn_dim}  max_context {c.max_context}")
        print(f"  seed {c.seed}  parameters {model.num_parameters()}")
        print(f"  fingerprint {weight_fingerprint(path):#018x}")
    elif magic == b"SPXP":
        bank = load_predictors(path)
        any_w = next(iter(bank.values()))
        print(f"predictor file: {path}")
        print(f"  layers {sorted(bank)}  k {any_w.k}  hidden {any_w.hidden}")
        print(f"  thresholds {[round(bank[l].threshold, 3) for l in sorted(bank)]}")
    elif magic == b"SPXS":
        prof = load_profile(path)
        print(f"profile file: {path}")
        print(f"  num_layers {prof.num_layers}  fingerprint {prof.fingerprint:#018x}")
        print(f"  exit counts {prof.exit_counts.tolist()}")
        print(f"  ranked layers {prof.ranked_layers}")
    elif path.suffix == ".json":
        print(BenchReport.from_json(path.read_text()).table())
    else:
        raise ValueError(f"unrecognized artifact: {path}")


def cmd_bench(args):
    pipe = _pipeline(args)
    report = pipe.bench()
    timing = json.loads((pipe.out / "timing.json").read_text())
    sim = json.loads((pipe.out / "similarity.json").read_text())
    print(report.table())
    print(f"tokens/sec (wall)  {timing['tokens_per_second']:.1f}")
    ratio = sim["ratio"]
    print(f"context similarity hit {sim['hit_rate']:.3f} base {sim['base_rate']:.3f} "
          f"ratio {ratio:.2f}" if ratio is not None else "context similarity: n/a")


def cmd_bench_kernels(args):
    n = args.size
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, n)).astype(np.float32)
    b = rng.standard_normal((n, n)).astype(np.float32)
    rows = []
    outs = {}
    prev = kernels.backend_name()
    for name in kernels.available_backends():
        kernels.set_backend(name)
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            out = kernels.matmul(a, b)
            kernels.seq_sum(out)
            best = min(best, time.perf_counter() - t0)
        outs[name] = out
        rows.append((name, best))
    for name, best in rows:
        print(f"{name:>4}: {best * 1e3:8.2f} ms  ({n}x{n} matmul + row sums)")
    if len(outs) == 2:
        diff = int(np.count_nonzero(outs["py"] != outs["c"]))
        print(f"bit-identical across backends: {diff == 0} ({diff} differing elements)")
    else:
        print("compiled backend unavailable; only the pure-Python kernels ran")
    kernels.set_backend(prev)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train-model":
            path = _pipeline(args).train_model("target")
            print(f"wrote {path}")
        elif args.command == "train-draft":
            path = _pipeline(args).train_model("draft")
            print(f"wrote {path}")
        elif args.command == "train-predictors":
            path = _pipeline(args).train_predictors()
            print(f"wrote {path}")
        elif args.command == "profile":
            path = _pipeline(args).profile()
            print(f"wrote {path}")
        elif args.command == "pipeline":
            pipe = _pipeline(args)
            pipe.run_all()
            print(f"pipeline complete; artifacts in {pipe.out}")
        elif args.command == "bench":
            cmd_bench(args)
        elif args.command == "generate":
            cmd_generate(args)
        elif args.command == "tree-generate":
            cmd_tree_generate(args)
        elif args.command == "oracle":
            cmd_oracle(args)
        elif args.command == "inspect":
            cmd_inspect(args)
        elif args.command == "bench-kernels":
            cmd_bench_kernels(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
