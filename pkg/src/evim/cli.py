"""Command-line front door.

Subcommands: verify, report, bench, breakdown, infer, train-toy.
Exit codes: 0 success, 1 property/runtime failure, 2 usage or config error,
3 corrupt input file. Every command takes --seed (default 0).
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import backbone as bb
from . import bench
from . import mixer as mx
from . import train
from . import verify
from . import weights as wf
from .ops import ContractError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3


def _load_model_config(spec: str) -> bb.ModelConfig:
    """A preset name (M1..M4) or a path to a JSON config file."""
    if spec in bb.PRESETS:
        return bb.preset(spec)
    return wf.load_config(spec).model


def _human(n: float) -> str:
    if n >= 1e9:
        return f"{n / 1e9:.2f}G"
    if n >= 1e6:
        return f"{n / 1e6:.2f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return str(int(n))


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(args) -> int:
    results = verify.run_suites([args.suite], seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_OK if not failed else EXIT_FAILURE


def cmd_report(args) -> int:
    cfg = _load_model_config(args.model)
    rows = bench.report_model(cfg, resolution=args.res)
    total = rows[-1]
    print(f"model {cfg.variant_name} @ {args.res or cfg.input_resolution[0]}^2")
    print(f"{'section':<14} {'params':>12} {'macs':>14} {'peak_bytes':>12}")
    for r in rows:
        print(f"{r['section']:<14} {r['params']:>12} {r['macs']:>14} {r['peak_bytes']:>12}")
    print(
        f"total: params {_human(total['params'])} "
        f"({total['params'] / 1e6:.2f}M), macs {_human(total['macs'])} "
        f"({total['macs'] / 1e6:.1f}M)"
    )
    if args.out:
        bench.write_report_csv(args.out, rows)
    return EXIT_OK


def cmd_bench(args) -> int:
    values = [int(v) for v in args.values.split(",") if v]
    mixers = tuple(m for m in args.mixers.split(",") if m)
    base = mx.MixerConfig(tokens=args.tokens, states=args.states, channels=args.channels)
    rows = bench.sweep_run(
        args.sweep, values, base, mixers,
        reps=args.reps, seed=args.seed, mem_cap_bytes=args.mem_cap,
    )
    for r in rows:
        print(
            f"{r['mixer']:<14} {r['axis']}={r['value']:<6} median {r['median_ns']:>12} ns"
            f"  macs {r['macs']:>12}  peak {r['peak_bytes']:>12}  {r['status']}"
        )
    if args.out:
        bench.write_sweep_csv(args.out, rows)
    return EXIT_OK


def cmd_breakdown(args) -> int:
    cfg = _load_model_config(args.model)
    grids = cfg.stage_grids()
    s = args.stage - 1
    mcfg = mx.MixerConfig(
        tokens=grids[s][0] * grids[s][1],
        states=cfg.states[s],
        channels=cfg.channels[s],
    )
    record = bench.breakdown_run(mcfg, reps=args.reps, seed=args.seed)
    print(f"mixer breakdown: {record.config} reps={record.reps}")
    for name in bench.PHASES:
        st = record.phases[name]
        print(f"{name:<18} median {st.median_ns:>10} ns  iqr {st.iqr_ns:>8}  macs {st.macs:>12}")
    print(
        f"total {record.total_median_ns} ns, analytic macs {record.macs}, "
        f"peak activation {record.peak_bytes} bytes"
    )
    if not record.reliable:
        print(f"warning: unreliable phases (below 10x timer tick): {record.unreliable_phases}")
    if args.out:
        bench.write_breakdown_csv(args.out, record)
    return EXIT_OK


def cmd_infer(args) -> int:
    tensors = wf.load_tensors(args.input)
    if set(tensors) != {"input"}:
        raise ContractError("input file must contain exactly one tensor named 'input'")
    img = tensors["input"]
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ContractError(f"input must be H x W x 3, got {img.shape}")
    model = wf.load_model(args.weights, resolution=img.shape[:2])
    dtype = bb.named_arrays(model)["fusion.beta"].dtype
    logits, _ = bb.model_forward(img.astype(dtype), model)
    wf.save_tensors(args.out, {"logits": np.asarray(logits)})
    top = int(np.argmax(logits))
    print(f"wrote {logits.shape[0]} logits to {args.out}; top-1 class {top} ({logits[top]:+.6f})")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    tc = train.TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        msf=args.msf == "on",
    )
    cfg = train.mini_config(tc.dataset)
    try:
        result = train.train_toy(cfg, tc)
    except train.TrainingDiverged as e:
        print(f"FAIL: {e}", file=sys.stderr)
        return EXIT_FAILURE
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss", "accuracy"])
            for step, loss, acc in result.steps:
                w.writerow([step, f"{loss:.9f}", f"{acc:.4f}"])
    last = result.steps[-1]
    print(
        f"{tc.steps} steps: loss {result.steps[0][1]:.4f} -> {last[1]:.4f}, "
        f"eval accuracy {result.final_accuracy:.3f}"
    )
    if tc.msf:
        drift = max(abs(s - 1.0) for s in result.fusion_weight_sums)
        print(f"fusion weights sum to 1 within {drift:.2e} at every step")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evim",
        description="Hidden-state-mixer token mixers and backbone: verification, "
        "reporting, benchmarking, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=verify.SUITES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="analytic params/MACs of a model config")
    p.add_argument("--model", required=True, help="M1..M4 or a config JSON path")
    p.add_argument("--res", type=int, default=None, help="square input resolution")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("bench", help="sweep mixers along one axis")
    p.add_argument("--sweep", choices=("L", "N", "D"), required=True)
    p.add_argument("--values", required=True, help="comma-separated increasing ints")
    p.add_argument("--mixers", default=",".join(bench.MIXERS))
    p.add_argument("--tokens", type=int, default=1024, help="base L")
    p.add_argument("--states", type=int, default=16, help="base N")
    p.add_argument("--channels", type=int, default=128, help="base D")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--mem-cap", type=int, default=bench.DEFAULT_MEM_CAP)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("breakdown", help="per-phase mixer timings")
    p.add_argument("--model", required=True, help="M1..M4 or a config JSON path")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_breakdown)

    p = sub.add_parser("infer", help="run a checkpoint on a raw input tensor")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="weight file with one tensor named 'input'")
    p.add_argument("--out", required=True, help="output weight file holding 'logits'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("train-toy", help="train the miniature model on synthetic data")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--msf", choices=("on", "off"), default="on")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except wf.CorruptWeightFile as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except (wf.ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except bench.ParallelismError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
