"""Command line entry point: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import sys

from .families import preset_names
from .pipeline import STAGES, Experiment, PipelineError, load_config, run_stage, verify


def _common(p):
    p.add_argument("--config", required=True, help="preset name or path to a JSON config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccmlab", description="Coordinate-line merging experiments on PDE families.")
    sub = ap.add_subparsers(dest="command", required=True)
    for s in STAGES:
        _common(sub.add_parser(s, help=f"run the {s} stage"))
    run = sub.add_parser("run", help="run several stages in order (default: all)")
    _common(run)
    run.add_argument("--stage", action="append", choices=STAGES, help="stage to run; repeatable")
    v = sub.add_parser("verify", help="re-check every recorded stage digest")
    v.add_argument("--out", required=True)
    sub.add_parser("presets", help="list shipped configurations")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    if args.command == "verify":
        problems = verify(args.out)
        for p in problems:
            print(p, file=sys.stderr)
        print("ok" if not problems else f"{len(problems)} problem(s)")
        return 0 if not problems else 1
    stages = [args.command] if args.command in STAGES else (args.stage or list(STAGES))
    try:
        exp = Experiment(load_config(args.config, args.seed), args.out, jobs=args.jobs)
        code = 0
        for s in sorted(stages, key=STAGES.index):
            m = run_stage(exp, s)
            res = m.get("result", {})
            status = ""
            if "ok" in res:
                status = "invariants ok" if res["ok"] else "INVARIANT FAILURE"
                if not res["ok"]:
                    code = 1
                    for k, v in res["checks"].items():
                        if not v:
                            print(f"  failed: {k}", file=sys.stderr)
            print(f"{s}: {m['outputs_digest'][:16]} {status}".rstrip(), flush=True)
        return code
    except (PipelineError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
