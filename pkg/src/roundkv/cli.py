"""Command line interface: simulate, verify, and bench subcommands.

Exit codes: 0 on success, 1 when verification or an in-run equivalence check
fails, 2 for a malformed configuration (the offending key is named on
stderr).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .trace import PATHS, RestoreMismatchError, run_trace
from .verify import run_verify


def _emit(text: str, out_path: Optional[str]) -> None:
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_simulate(args: argparse.Namespace) -> int:
    spec, paths = load_config(args.config)
    try:
        report = run_trace(spec, paths=paths)
    except RestoreMismatchError as exc:
        print(f"error: restore verification failed: {exc}", file=sys.stderr)
        return 1
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    spec, _ = load_config(args.config)
    ok, lines = run_verify(spec)
    for line in lines:
        print(line)
    print(f"{'OK' if ok else 'FAILED'}: {sum(l.startswith('PASS') for l in lines)}"
          f"/{len(lines)} checks passed")
    return 0 if ok else 1


def _cmd_bench(args: argparse.Namespace) -> int:
    spec, paths = load_config(args.config)
    results = {}
    for path in paths:
        seconds = []
        for _ in range(args.repeats):
            start = time.perf_counter()
            report = run_trace(spec, paths=(path,))
            seconds.append(time.perf_counter() - start)
        summary = report["summary"][path]
        results[path] = {
            "seconds_per_run": [round(s, 6) for s in seconds],
            "best_seconds": round(min(seconds), 6),
            "rounds": summary["rounds"],
            "recomputed_tokens_total": summary["recomputed_tokens_total"],
            "bytes_stored_total": summary["bytes_stored_total"],
            "bytes_moved_total": summary["bytes_moved_total"],
        }
    payload = {
        "bench": results,
        "repeats": args.repeats,
        "note": "wall-clock timings vary between machines; counters are exact",
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roundkv",
        description="Round-based KV cache reuse engine and simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser(
        "simulate",
        help=f"run the workload over the configured paths {'/'.join(PATHS)}"
             " and print a JSON report",
    )
    sim.add_argument("--config", default=None, help="JSON config file (defaults when omitted)")
    sim.add_argument("--out", default=None, help="write the report here instead of stdout")
    sim.set_defaults(fn=_cmd_simulate)

    ver = sub.add_parser("verify", help="run the named invariant checks and report pass/fail")
    ver.add_argument("--config", default=None, help="JSON config file (defaults when omitted)")
    ver.set_defaults(fn=_cmd_verify)

    ben = sub.add_parser("bench", help="time simulation runs per path and print counters")
    ben.add_argument("--config", default=None, help="JSON config file (defaults when omitted)")
    ben.add_argument("--repeats", type=int, default=3, help="timed runs per path (default 3)")
    ben.add_argument("--out", default=None, help="write timings here instead of stdout")
    ben.set_defaults(fn=_cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "repeats", 1) < 1:
        print("error: --repeats must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
