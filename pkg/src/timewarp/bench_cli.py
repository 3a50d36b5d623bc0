"""Benchmark driver CLI.

Subcommands:
    run      execute a trial (timewarp or sleep mode) from a config file
    oracle   compute the discrete-event reference timeline for a config
    compare  diff two run reports (relative errors + KS distance)
    replay   audit a timekeeper log against the barrier rules

Typical round trip:
    bench run --config cfg.json --mode timewarp --out out/warp
    bench oracle --config cfg.json --out out/ref
    bench compare --candidate out/warp/report.json --reference out/ref/report.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from timewarp.metrics import RunReport, compare_runs
from timewarp.replay import ReplayMismatch, replay_and_verify
from timewarp.runner import run_benchmark, run_oracle
from timewarp.time_core import NS_PER_MS

log = logging.getLogger(__name__)


def _load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _print_summary(report: RunReport) -> None:
    s = report.summary()
    print(f"mode={s['mode']} requests={s['num_requests']} fingerprint={s['workload_fingerprint']}")
    print(
        f"virtual={s['virtual_elapsed_ns'] / NS_PER_MS:.1f}ms "
        f"wall={s['wall_elapsed_ns'] / NS_PER_MS:.1f}ms "
        f"speedup={s['speedup']:.2f}x"
    )
    for metric in ("ttft_ns", "tpot_ns", "e2e_ns"):
        if metric in s:
            st = s[metric]
            print(
                f"{metric[:-3]}: p50={st['p50'] / NS_PER_MS:.3f}ms "
                f"p90={st['p90'] / NS_PER_MS:.3f}ms p99={st['p99'] / NS_PER_MS:.3f}ms "
                f"mean={st['mean'] / NS_PER_MS:.3f}ms"
            )


def _cmd_run(args) -> int:
    report = run_benchmark(_load_config(args.config), args.mode, args.out, verify_log=not args.no_verify_log)
    _print_summary(report)
    return 0


def _cmd_oracle(args) -> int:
    report = run_oracle(_load_config(args.config), args.out)
    _print_summary(report)
    return 0


def _cmd_compare(args) -> int:
    candidate = RunReport.load(args.candidate)
    reference = RunReport.load(args.reference)
    diff = compare_runs(candidate, reference)
    if args.json:
        print(json.dumps(diff, indent=2))
    else:
        for metric in ("ttft", "tpot", "e2e"):
            if metric not in diff:
                continue
            d = diff[metric]
            print(
                f"{metric}: p50={d['p50']:.4%} p90={d['p90']:.4%} "
                f"p99={d['p99']:.4%} mean={d['mean']:.4%} ks={d['ks']:.4f}"
            )
        print(f"max relative error: {diff['max_rel_err']:.4%}")
    if diff["max_rel_err"] > args.max_rel_err:
        print(f"FAIL: max relative error exceeds {args.max_rel_err:.4%}", file=sys.stderr)
        return 1
    return 0


def _cmd_replay(args) -> int:
    try:
        report = replay_and_verify(args.log)
    except ReplayMismatch as exc:
        print(f"REPLAY MISMATCH: {exc}", file=sys.stderr)
        return 1
    print(
        f"log ok: {report.records} records, {report.rounds} rounds, "
        f"{report.broadcasts} broadcasts ({report.suppressed} suppressed), "
        f"{report.releases} releases, final offset {report.final_offset_ns}ns "
        f"seq {report.final_seq}"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="emulated serving benchmark driver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a benchmark trial")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--mode", choices=("timewarp", "sleep"), default="timewarp")
    p_run.add_argument("--out", required=True)
    p_run.add_argument(
        "--no-verify-log",
        action="store_true",
        help="skip the post-run audit of the timekeeper log",
    )
    p_run.set_defaults(func=_cmd_run)

    p_oracle = sub.add_parser("oracle", help="discrete-event reference run")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--out", required=True)
    p_oracle.set_defaults(func=_cmd_oracle)

    p_cmp = sub.add_parser("compare", help="compare two run reports")
    p_cmp.add_argument("--candidate", required=True)
    p_cmp.add_argument("--reference", required=True)
    p_cmp.add_argument("--json", action="store_true")
    p_cmp.add_argument(
        "--max-rel-err",
        type=float,
        default=0.05,
        help="fail when any statistic deviates more than this "
        "(default 0.05; pass a large value to only report)",
    )
    p_cmp.set_defaults(func=_cmd_compare)

    p_rep = sub.add_parser("replay", help="audit a timekeeper log")
    p_rep.add_argument("--log", required=True)
    p_rep.set_defaults(func=_cmd_replay)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
