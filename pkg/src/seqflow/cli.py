"""Command line interface: the overhead benchmark and the demo scenarios."""

from __future__ import annotations

import argparse
import sys

from .bench import DEMOS, BenchConfig, run_demo, run_overhead
from .errors import ConfigurationError, SeqflowError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqflow",
        description="Task-based runtime: overhead benchmark and demos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run the overhead measurement protocol")
    bench.add_argument("what", nargs="?", default="overhead",
                       choices=["overhead"])
    bench.add_argument("--workers", type=int, default=4,
                       help="worker count T (and sub-chain count)")
    bench.add_argument("--tasks-per-chain", type=int, default=1000,
                       help="tasks N inserted per sub-chain")
    bench.add_argument("--duration", type=float, default=1e-3,
                       help="per-task sleep D in seconds")
    bench.add_argument("--mode", choices=["write", "commute"], default="write",
                       help="access mode of the chain dependency")
    bench.add_argument("--deps", type=int, default=1,
                       help="dependencies per task (1..20), extras are reads")
    bench.add_argument("--sched", choices=["fifo", "prio"], default="fifo")
    bench.add_argument("--reps", type=int, default=3)
    bench.add_argument("--out", default=None,
                       help="directory for overhead.csv / overhead.json / "
                            "raw_timestamps.json")

    demo = sub.add_parser("demo", help="run a feature demo, exporting dot and SVG")
    demo.add_argument("name", choices=sorted(DEMOS))
    demo.add_argument("--out", default="seqflow-demo",
                      help="output directory for graph.dot and trace.svg")
    demo.add_argument("--workers", type=int, default=4)
    demo.add_argument("--devices", type=int, default=1)
    demo.add_argument("--device-mem", type=int, default=16 << 20,
                      help="bytes per simulated device arena")
    demo.add_argument("--ranks", type=int, default=2,
                      help="instances of the in-process communicator")
    demo.add_argument("--sched", choices=["fifo", "prio"], default="fifo")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "bench":
            config = BenchConfig(
                workers=args.workers,
                tasks_per_chain=args.tasks_per_chain,
                duration=args.duration,
                mode=args.mode,
                deps=args.deps,
                sched=args.sched,
                reps=args.reps,
                out=args.out,
            )
            run_overhead(config)
            return 0
        if args.command == "demo":
            kwargs = {"workers": args.workers, "sched": args.sched}
            if args.name == "device-roundtrip":
                kwargs.update(devices=args.devices, device_mem=args.device_mem)
            elif args.name == "comm-pingpong":
                kwargs.update(ranks=args.ranks)
            return run_demo(args.name, args.out, **kwargs)
        parser.error(f"unknown command {args.command!r}")
        return 2
    except ConfigurationError as exc:
        print(f"seqflow: usage error: {exc}", file=sys.stderr)
        return 2
    except SeqflowError as exc:
        print(f"seqflow: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
