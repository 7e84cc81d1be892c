"""Scenario execution: wire a workflow into a simulator run and apply checkers.

A scenario JSON names the requests, fault plan, collector timing,
initial data, and the checkers to run. Reference state for the
exactly-once checker comes from re-running the same requests
sequentially with faults off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .. import daal, invoke
from ..sim import FaultPlan, GcConfig, Scheduler
from ..store import Store
from ..collectors import register_collectors
from .checkers import (CheckReport, check_atomicity, check_exactly_once,
                       check_opacity, check_quiescent_cleanup,
                       check_serializability, check_structure, data_values)
from .workflow import WorkflowDef, build_runtime


@dataclass
class ScenarioResult:
    workflow: WorkflowDef
    scenario: dict
    store: Store
    sim: Scheduler
    runtime: object
    quiesced: bool
    reports: list = field(default_factory=list)
    request_results: dict = field(default_factory=dict)

    @property
    def events(self):
        return self.sim.events

    def passed(self):
        return all(r.passed for r in self.reports)


def expand_requests(spec):
    """Request list: either explicit entries or a {ssf, count, args} block
    whose args_by_index flags inject the request ordinal."""
    if isinstance(spec, list):
        return [(r["ssf"], r.get("args"), r.get("at", 0)) for r in spec]
    out = []
    for i in range(spec["count"]):
        args = dict(spec.get("args") or {})
        for key in (spec.get("args_by_index") or {}):
            args[key] = i
        out.append((spec["ssf"], args, i * spec.get("spread", 0)))
    return out


class StepRouter:
    """Platform-side routing for step-function workflows: delivers each
    node's first completion to its successors, joining fan-ins. Models
    the provider's workflow engine, which (like the store) is assumed
    reliable; node executions themselves crash and get relaunched."""

    def __init__(self, sim, wf, runtime):
        self.sim = sim
        self.wf = wf
        self.runtime = runtime
        self.requests: dict = {}     # request iid -> {node: output}
        self.node_iids: dict = {}    # execution iid -> (request iid, node)
        sim.completion_listeners.append(self.on_complete)

    def start(self, req_iid, args):
        self.requests[req_iid] = {}
        self.node_iids[req_iid] = (req_iid, self.wf.entry)
        payload = {"kind": invoke.CALL,
                   "args": {"inputs": {"__request__": {"value": args}}}}
        self.sim.add_request(self.wf.entry, payload, iid=req_iid)

    def on_complete(self, iid, ssf, result):
        key = self.node_iids.get(iid)
        if key is None:
            return
        req, node = key
        outputs = self.requests[req]
        if node in outputs:
            return  # relaunch finishing after the first completion
        outputs[node] = result
        for succ in self.wf.successors(node):
            preds = self.wf.predecessors(succ)
            if succ in outputs or any(p not in outputs for p in preds):
                continue
            if any(self.node_iids.get(i) == (req, succ) for i in self.node_iids):
                continue
            payload = {"kind": invoke.CALL,
                       "args": {"inputs": {p: outputs[p] for p in preds}}}
            niid, _ = self.sim.spawn_execution(succ, payload)
            self.node_iids[niid] = (req, succ)


def _baseline_retry(sim, runtime, retries=50):
    """Naive platform behavior for the negative control: restart a crashed
    instance from scratch under a fresh id."""
    budget: dict = {}

    def on_failure(ex, reason):
        if ex.collector:
            return
        root = sim._root_alias.get(ex.iid, ex.iid)
        if root not in sim._root_done or sim._root_done[root]:
            return
        if budget.get(root, 0) >= retries:
            return
        budget[root] = budget.get(root, 0) + 1
        new_iid = sim.next_id(ex.ssf)
        sim._root_alias[new_iid] = root
        sim.spawn_execution(ex.ssf, ex.payload, iid=new_iid, relaunch=True)

    sim.failure_listeners.append(on_failure)


def build_sim(wf, scenario, baseline=False, sequential=False, faults=None):
    faults = faults if faults is not None else FaultPlan.from_dict(scenario.get("faults"))
    gc_spec = dict(scenario.get("gc") or {})
    collectors_on = gc_spec.pop("enabled", True) and not baseline
    cfg = GcConfig.from_dict(gc_spec)
    store = Store(seed=faults.seed)
    runtime = build_runtime(wf, baseline=baseline)
    runtime.create_tables(store)
    for table, kv in (scenario.get("initial") or {}).items():
        for key, value in kv.items():
            daal.seed_value(store, table, key, value)
    sim = Scheduler(store, invoke.make_runner(runtime), faults, cfg,
                    trace_level=scenario.get("trace_level", "app"))
    sim._root_alias = {}
    sim.sequential = sequential
    if collectors_on:
        register_collectors(sim, runtime, cfg)
    results: dict = {}
    router = StepRouter(sim, wf, runtime) if wf.mode == "step" else None
    reqs = expand_requests(scenario.get("requests") or [])
    for i, (ssf, args, at) in enumerate(reqs):
        iid = "req%03d-%s" % (i, ssf)
        if router is not None:
            router.start(iid, args)
        else:
            sim.add_request(ssf, {"kind": invoke.CALL, "args": args}, at=at, iid=iid)

    def on_complete(iid, ssf, result):
        if iid.startswith("req"):
            results.setdefault(iid, result)
        root = sim._root_alias.get(iid)
        if root is not None:
            results.setdefault(root, result)
            sim._root_done[root] = True

    sim.completion_listeners.append(on_complete)
    if baseline:
        _baseline_retry(sim, runtime)
    else:
        _platform_redelivery(sim, store, runtime, router)
    return sim, store, runtime, results


def _platform_redelivery(sim, store, runtime, router):
    """Client/platform-side at-least-once delivery for executions the
    platform itself launched (root requests, routed step nodes).

    Covers exactly the two gaps the intent collector cannot: a death
    before the intent was durably registered (the collector has nothing
    to find) and a death after the done-mark but before the response
    (the collector ignores done intents, but the client still needs its
    answer). Mid-flight recovery stays with the collector and its
    backoff. Redelivery reuses the instance id, so it is idempotent."""
    from ..runtime import INTENT_SORT, system_tables
    delivered: set = set()

    def on_complete(iid, ssf, result):
        delivered.add(iid)

    def on_failure(ex, reason):
        if ex.collector or ex.payload is None or ex.iid in delivered:
            return
        platform_owned = ex.iid in sim._root_done or (
            router is not None and ex.iid in router.node_iids)
        if not platform_owned:
            return
        intent_table = system_tables(ex.ssf)["intent"]
        rec = store.raw_read(intent_table, ex.iid, INTENT_SORT)
        if rec is None or rec.get("Done"):
            sim.spawn_execution(ex.ssf, ex.payload, iid=ex.iid, relaunch=True)

    sim.completion_listeners.append(on_complete)
    sim.failure_listeners.append(on_failure)


def run_scenario(wf: WorkflowDef, scenario: dict, baseline=None) -> ScenarioResult:
    baseline = scenario.get("baseline", False) if baseline is None else baseline
    sim, store, runtime, results = build_sim(wf, scenario, baseline=baseline)
    quiesced = sim.run(idle_time=scenario.get("idle_time", 0))
    res = ScenarioResult(wf, scenario, store, sim, runtime, quiesced,
                         request_results=results)
    checks = scenario.get("checks") or []
    reference = None
    if "exactly-once" in checks:
        reference = run_reference(wf, scenario)
    for name in checks:
        res.reports.append(_dispatch(name, res, scenario, reference))
    return res


def run_reference(wf, scenario) -> ScenarioResult:
    """Fault-free serialized run of the same requests: the oracle for
    exactly-once equivalence."""
    ref = dict(scenario)
    ref["checks"] = []
    seed = FaultPlan.from_dict(scenario.get("faults")).seed
    sim, store, runtime, results = build_sim(
        wf, ref, baseline=False, sequential=True,
        faults=FaultPlan(seed=seed, crash_rate=0.0, crashes=[]))
    quiesced = sim.run()
    return ScenarioResult(wf, ref, store, sim, runtime, quiesced,
                          request_results=results)


def _initial_state(scenario):
    out = {}
    for table, kv in (scenario.get("initial") or {}).items():
        for key, value in kv.items():
            out[(table, key)] = value
    return out


def _dispatch(name, res, scenario, reference) -> CheckReport:
    if name == "exactly-once":
        return check_exactly_once(res, reference)
    if name == "structure":
        return check_structure(res, quiescent=res.quiesced)
    if name == "quiescent-cleanup":
        return check_quiescent_cleanup(
            res, heads_only=scenario.get("heads_only", True))
    if name == "serializability":
        return check_serializability(res.events, initial=_initial_state(scenario))
    if name == "opacity":
        return check_opacity(res.events, initial=_initial_state(scenario))
    if name == "atomicity":
        pair = scenario.get("atomicity_tables", ["hotel_res", "flight_res"])
        return check_atomicity(res, pair[0], pair[1])
    return CheckReport(name, False, {"reason": "unknown checker"})


def report_json(result: ScenarioResult) -> str:
    return json.dumps({
        "workflow": result.workflow.name,
        "quiesced": result.quiesced,
        "passed": result.passed(),
        "reports": [{"checker": r.checker, "passed": r.passed,
                     "counterexample": r.counterexample, "stats": r.stats}
                    for r in result.reports],
    }, indent=2, sort_keys=True)
