"""Command line entry point.

    ssfsim run --workflow travel.json --scenario s.json \
        [--seed-range 0..99] [--check exactly-once,structure] \
        [--dump-store out.jsonl] [--trace trace.jsonl] [--baseline]

Workflows and scenarios are JSON files; ``builtin:NAME`` selects a
bundled example (see ``ssfsim builtins``). Exit status is 0 iff every
checker passed on every seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys

from .apps import BUILTIN_SCENARIOS, BUILTIN_WORKFLOWS
from .scenario import run_scenario, report_json
from .workflow import WorkflowError, load_workflow


def _load_workflow_arg(spec):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_WORKFLOWS:
            raise WorkflowError("no builtin workflow %r" % name)
        return BUILTIN_WORKFLOWS[name]()
    return load_workflow(spec)


def _load_scenario_arg(spec):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_SCENARIOS:
            raise WorkflowError("no builtin scenario %r" % name)
        return copy.deepcopy(BUILTIN_SCENARIOS[name])
    with open(spec) as fh:
        return json.load(fh)


def _parse_seed_range(text):
    lo, _, hi = text.partition("..")
    return range(int(lo), int(hi) + 1)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ssfsim", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    runp = sub.add_parser("run", help="run a scenario and its checkers")
    runp.add_argument("--workflow", required=True)
    runp.add_argument("--scenario", required=True)
    runp.add_argument("--seed-range", help="a..b inclusive; overrides the scenario seed")
    runp.add_argument("--check", help="comma-separated checker override")
    runp.add_argument("--baseline", action="store_true",
                      help="disable the exactly-once wrappers (negative control)")
    runp.add_argument("--dump-store", metavar="PATH")
    runp.add_argument("--trace", metavar="PATH",
                      help="write the full event trace as JSONL")
    runp.add_argument("--report", metavar="PATH", help="write reports JSON here")
    runp.add_argument("--quiet", action="store_true")

    sub.add_parser("builtins", help="list bundled workflows and scenarios")

    args = parser.parse_args(argv)
    if args.cmd == "builtins":
        for name in sorted(BUILTIN_WORKFLOWS):
            print("builtin:%s" % name)
        return 0

    wf = _load_workflow_arg(args.workflow)
    scenario = _load_scenario_arg(args.scenario)
    if args.check:
        scenario["checks"] = [c for c in args.check.split(",") if c]
    if args.baseline:
        scenario["baseline"] = True
    if args.trace:
        scenario["trace_level"] = "full"
    seeds = _parse_seed_range(args.seed_range) if args.seed_range else [None]

    all_passed = True
    reports_out = []
    for seed in seeds:
        sc = copy.deepcopy(scenario)
        if seed is not None:
            sc.setdefault("faults", {})["seed"] = seed
        result = run_scenario(wf, sc)
        ok = result.passed() and result.quiesced
        all_passed = all_passed and ok
        reports_out.append(json.loads(report_json(result)))
        if seed is not None:
            reports_out[-1]["seed"] = seed
        if not args.quiet:
            tag = "" if seed is None else " seed=%d" % seed
            print("%s%s quiesced=%s" % (wf.name, tag, result.quiesced))
            for rep in result.reports:
                print("  " + rep.line())
        if args.dump_store:
            path = args.dump_store if seed is None else "%s.%d" % (args.dump_store, seed)
            with open(path, "w") as fh:
                fh.write(result.store.dump_jsonl())
        if args.trace:
            path = args.trace if seed is None else "%s.%d" % (args.trace, seed)
            with open(path, "w") as fh:
                fh.write(result.sim.trace_jsonl())
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(reports_out, fh, indent=2, sort_keys=True)
    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
