"""Command line front door.

`insitu vaccinate` shows what the transformation does to a function,
`insitu coordinator` serves the fleet rendezvous point, `insitu bench`
runs the measurement suite, and `insitu demo-crash` drops you into the
recovery console on a staged failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .vaccinate import RecoveryOptions, decompose_preview, vaccinate_source


def _cmd_vaccinate(args) -> int:
    source = Path(args.file).read_text()
    tree, module_src = decompose_preview(source, args.function,
                                         decompose=not args.flat)
    if args.emit:
        print(module_src)
        return 0
    print(f"{args.function}: {len(tree)} cells")
    def walk(cell_id: str, prefix: str) -> None:
        node = tree.nodes[cell_id]
        origin = str(node.origin)
        print(f"{prefix}{node.cell_id}  [{node.block_kind}] {origin}")
        for child in node.children:
            walk(child, prefix + "  ")
    walk(tree.root, "")
    return 0


def _cmd_coordinator(args) -> int:
    from .coordinator import serve

    serve(args.bind, forever=True)
    return 0


def _cmd_bench_list(args) -> int:
    from .bench import all_scenarios

    for s in all_scenarios():
        tags = s.category + ("" if s.recoverable else ", not recoverable")
        print(f"{s.name:<18} {tags}")
    return 0


def _cmd_bench_run(args) -> int:
    from .bench import MODES, run_scenario, all_scenarios, get_scenario
    from .bench.reporting import summarize, write_report

    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if bad:
        print(f"unknown mode(s) {bad}; choose from {', '.join(MODES)}",
              file=sys.stderr)
        return 2
    scenarios = ([get_scenario(n) for n in args.scenario]
                 if args.scenario else list(all_scenarios()))

    reports = [run_scenario(s, mode) for s in scenarios for mode in modes]
    samples = None
    if args.restore:
        from .bench import measure_restore

        steps, pace = 200, 0.005
        samples = [measure_restore(ci, steps=steps, pace=pace, mode=m)
                   for ci in (steps // 10, steps // 2, 9 * steps // 10)
                   for m in ("in-situ", "restart")]
    overhead = None
    if args.overhead:
        from .bench import measure_overhead

        overhead = measure_overhead()
    micro = None
    if args.micro:
        from .bench.microbench import run_microbench

        micro = run_microbench()
    drill = None
    if args.drill:
        from .bench.distributed import run_drill

        drill = run_drill()

    print(summarize(reports, samples), end="")
    if overhead is not None:
        print(f"overhead: {overhead.fraction * 100:+.3f}%"
              + (" (unstable)" if overhead.unstable else ""))
    if micro is not None:
        ratios = micro.ratios()
        print("microbench vs output statement: "
              + "  ".join(f"{k}={v:.2f}x" for k, v in ratios.items()))
    if drill is not None:
        print(f"drill: ok={drill.ok} host={drill.fix_host} "
              f"healed={list(drill.healed_by_relay)} in {drill.elapsed_s:.2f}s")

    failures = [r for r in reports if r.outcome == "failed"]
    if args.out:
        paths = write_report(Path(args.out), reports=reports, samples=samples,
                             overhead=overhead, micro=micro, drill=drill)
        for p in paths:
            print(f"wrote {p}")
    return 0 if not args.check else (1 if failures else 0)


def _cmd_bench_micro(args) -> int:
    from .bench.microbench import run_microbench

    report = run_microbench(number=args.number)
    print(json.dumps(report.to_json(), indent=2))
    return 0


DEMO_SOURCE = '''
def demo(steps):
    done = []
    for i in range(steps):
        print(f"step {i}: ok")
        uplink(i)
        done.append(i)
    return done
'''


def _cmd_demo(args) -> int:
    from .bench.faults import FlakyCall

    env = {"uplink": FlakyCall(lambda i: None, args.crash_at + 1,
                               lambda: RuntimeError("demo uplink dropped")),
           "print": print}
    options = RecoveryOptions(script=args.script) if args.script else \
        RecoveryOptions(interactive="always")
    program = vaccinate_source(DEMO_SOURCE, "demo", env, options=options,
                               program_id="demo")
    value = program.entry(args.steps)
    print(f"finished: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insitu",
        description="crash recovery for long-running Python loops")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vaccinate", help="preview a function's cell layout")
    p.add_argument("file", help="python source file")
    p.add_argument("--function", required=True, help="entry function name")
    p.add_argument("--emit", action="store_true",
                   help="print the decomposed module instead of the tree")
    p.add_argument("--flat", action="store_true",
                   help="single-cell form (no loop body cells)")
    p.set_defaults(fn=_cmd_vaccinate)

    p = sub.add_parser("coordinator", help="serve a fleet rendezvous point")
    p.add_argument("--bind", default="127.0.0.1:7707", help="host:port")
    p.set_defaults(fn=_cmd_coordinator)

    bench = sub.add_parser("bench", help="measurement suite")
    bsub = bench.add_subparsers(dest="bench_command", required=True)

    p = bsub.add_parser("list", help="list fault scenarios")
    p.set_defaults(fn=_cmd_bench_list)

    p = bsub.add_parser("run", help="run scenarios and report")
    p.add_argument("--modes", default="in-situ,restart",
                   help="comma list: in-situ,restart,pass-only,no-fd")
    p.add_argument("--scenario", action="append",
                   help="run one scenario (repeatable); default all")
    p.add_argument("--out", help="directory for report files and figures")
    p.add_argument("--restore", action="store_true",
                   help="add the paced restore-time study")
    p.add_argument("--overhead", action="store_true",
                   help="add the no-crash overhead measurement")
    p.add_argument("--micro", action="store_true",
                   help="add the per-construct microbench")
    p.add_argument("--drill", action="store_true",
                   help="add the multi-worker recovery drill")
    p.add_argument("--check", action="store_true",
                   help="exit nonzero if any run failed")
    p.set_defaults(fn=_cmd_bench_run)

    p = bsub.add_parser("microbench", help="per-construct costs only")
    p.add_argument("--number", type=int, default=200_000,
                   help="timing loop iterations")
    p.set_defaults(fn=_cmd_bench_micro)

    p = sub.add_parser("demo-crash",
                       help="stage a crash and open the recovery console")
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--crash-at", type=int, default=2,
                   help="iteration that trips the staged fault")
    p.add_argument("--script", help="recovery procedure file (JSON) to "
                                    "apply instead of the console")
    p.set_defaults(fn=_cmd_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
