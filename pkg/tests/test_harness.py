"""Workflow validation, sovereignty enforcement, checkers, baseline mode,
and the CLI surface."""

import json

import pytest

from ssfsim import daal
from ssfsim.harness import load_workflow, run_scenario
from ssfsim.harness.apps import BUILTIN_SCENARIOS, counter_workflow
from ssfsim.harness.checkers import (check_opacity, check_serializability,
                                     check_structure)
from ssfsim.harness.cli import main as cli_main
from ssfsim.harness.workflow import WorkflowDef, WorkflowError
from ssfsim.sim import SovereigntyViolation

from conftest import register_handler, single_ssf_workflow


def noop_handler(env, args):
    v = yield from env.read("t1", "k")
    return v


# -- workflow validation -------------------------------------------------------

def wf_dict(**overrides):
    d = {
        "name": "w", "entry": "a",
        "ssfs": [{"name": "a", "handler": register_handler(noop_handler),
                  "tables": {"t1": {}}}],
        "edges": [],
    }
    d.update(overrides)
    return d


def test_minimal_workflow_loads():
    WorkflowDef.from_dict(wf_dict()).validate()


def test_edge_to_undeclared_ssf_rejected():
    with pytest.raises(WorkflowError, match="edge target"):
        WorkflowDef.from_dict(wf_dict(edges=[["a", "ghost"]])).validate()


def test_table_claimed_twice_rejected():
    d = wf_dict()
    d["ssfs"].append({"name": "b", "handler": d["ssfs"][0]["handler"],
                      "tables": {"t1": {}}})
    with pytest.raises(WorkflowError, match="claimed by both"):
        WorkflowDef.from_dict(d).validate()


def test_unknown_handler_rejected():
    d = wf_dict()
    d["ssfs"][0]["handler"] = "no.such.handler"
    with pytest.raises(WorkflowError, match="unknown handler"):
        WorkflowDef.from_dict(d).validate()


def test_step_mode_requires_acyclic():
    d = wf_dict(mode="step", edges=[["a", "a"]])
    with pytest.raises(WorkflowError, match="acyclic"):
        WorkflowDef.from_dict(d).validate()


def test_load_workflow_reports_json_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(WorkflowError, match="line"):
        load_workflow(str(p))


def test_load_workflow_roundtrip(tmp_path):
    p = tmp_path / "wf.json"
    p.write_text(json.dumps(wf_dict()))
    wf = load_workflow(str(p))
    assert wf.entry == "a"


# -- sovereignty ------------------------------------------------------------------

def test_sovereignty_violation_aborts_simulation():
    def intruder(env, args):
        v = yield from env.read("other_table", "k")
        return v

    wf = single_ssf_workflow(intruder, {"own": {}}, name="bad",
                             extra_ssfs=[("owner", noop_handler,
                                          {"other_table": {}})])
    with pytest.raises(SovereigntyViolation):
        run_scenario(wf, {"requests": [{"ssf": "bad", "args": {}}],
                          "faults": {"seed": 0}, "checks": []})


def test_invoking_off_edge_target_fails_instance():
    def caller(env, args):
        res = yield from env.sync_invoke("stranger", {})
        return res

    wf = single_ssf_workflow(caller, {}, name="c",
                             extra_ssfs=[("stranger", noop_handler, {"t1": {}})])
    res = run_scenario(wf, {"requests": [{"ssf": "c", "args": {}}],
                            "faults": {"seed": 0, "max_logical_time": 2000},
                            "checks": []})
    # the instance dies with a workflow violation and can never finish
    assert not res.quiesced
    crashes = [e for e in res.events if e[2] == "crash"
               and "WorkflowViolation" in str(e[4])]
    assert crashes


# -- checkers ----------------------------------------------------------------------

def _mk_events(records):
    return [(t, i, kind, "i", detail) for i, (t, kind, detail) in enumerate(records)]


def test_serializability_checker_accepts_serial_history():
    events = _mk_events([
        (1, "txnBegin", {"txnId": "T1", "startTime": 1}),
        (2, "txnRead", {"txnId": "T1", "table": "d", "key": "x", "value": 0, "step": 0}),
        (3, "txnWrite", {"txnId": "T1", "table": "d", "key": "x", "value": 1, "step": 1}),
        (4, "txnEnd", {"txnId": "T1", "mode": "C"}),
        (5, "txnBegin", {"txnId": "T2", "startTime": 5}),
        (6, "txnRead", {"txnId": "T2", "table": "d", "key": "x", "value": 1, "step": 0}),
        (7, "txnEnd", {"txnId": "T2", "mode": "C"}),
    ])
    rep = check_serializability(events, initial={("d", "x"): 0})
    assert rep.passed


def test_serializability_checker_rejects_impossible_reads():
    events = _mk_events([
        (1, "txnBegin", {"txnId": "T1", "startTime": 1}),
        (2, "txnRead", {"txnId": "T1", "table": "d", "key": "x", "value": 77, "step": 0}),
        (3, "txnEnd", {"txnId": "T1", "mode": "C"}),
    ])
    rep = check_serializability(events, initial={("d", "x"): 0})
    assert not rep.passed


def occ_counterexample_events():
    """Hand-built optimistic-concurrency interleaving: T1 commits x=3,y=5
    from initial (0,1); T2 observed x=3 (after T1's x-write) with y=1
    (before T1's y-write) and aborted."""
    return _mk_events([
        (1, "txnBegin", {"txnId": "T1", "startTime": 1}),
        (2, "txnRead", {"txnId": "T1", "table": "d", "key": "x", "value": 0, "step": 0}),
        (3, "txnRead", {"txnId": "T1", "table": "d", "key": "y", "value": 1, "step": 1}),
        (4, "txnBegin", {"txnId": "T2", "startTime": 2}),
        (5, "txnWrite", {"txnId": "T1", "table": "d", "key": "x", "value": 3, "step": 2}),
        (6, "txnRead", {"txnId": "T2", "table": "d", "key": "x", "value": 3, "step": 0}),
        (7, "txnRead", {"txnId": "T2", "table": "d", "key": "y", "value": 1, "step": 1}),
        (8, "txnWrite", {"txnId": "T1", "table": "d", "key": "y", "value": 5, "step": 3}),
        (9, "txnEnd", {"txnId": "T1", "mode": "C"}),
        (10, "txnEnd", {"txnId": "T2", "mode": "A"}),
    ])


def test_opacity_checker_rejects_occ_counterexample():
    rep = check_opacity(occ_counterexample_events(),
                        initial={("d", "x"): 0, ("d", "y"): 1})
    assert not rep.passed
    assert rep.counterexample["txn"] == "T2"


def test_opacity_checker_accepts_snapshot_reads():
    events = _mk_events([
        (1, "txnBegin", {"txnId": "T1", "startTime": 1}),
        (2, "txnWrite", {"txnId": "T1", "table": "d", "key": "x", "value": 3, "step": 0}),
        (3, "txnWrite", {"txnId": "T1", "table": "d", "key": "y", "value": 5, "step": 1}),
        (4, "txnEnd", {"txnId": "T1", "mode": "C"}),
        (5, "txnBegin", {"txnId": "T2", "startTime": 5}),
        (6, "txnRead", {"txnId": "T2", "table": "d", "key": "x", "value": 3, "step": 0}),
        (7, "txnRead", {"txnId": "T2", "table": "d", "key": "y", "value": 5, "step": 1}),
        (8, "txnEnd", {"txnId": "T2", "mode": "A"}),
    ])
    rep = check_opacity(events, initial={("d", "x"): 0, ("d", "y"): 1})
    assert rep.passed


def test_structure_checker_flags_dangling_reachable_pointer():
    wf = counter_workflow()
    res = run_scenario(wf, {"requests": [{"ssf": "counter", "args": {}}],
                            "faults": {"seed": 0}, "checks": []})
    assert check_structure(res).passed
    # corrupt: reachable NextRow to a row that does not exist
    res.store.raw_write("counters", "c", "HEAD", [("set", "NextRow", "ghost")])
    rep = check_structure(res)
    assert not rep.passed
    assert rep.counterexample["reason"] == "reachable NextRow dangles"


def test_structure_checker_tolerates_orphans():
    wf = counter_workflow()
    res = run_scenario(wf, {"requests": [{"ssf": "counter", "args": {}}],
                            "faults": {"seed": 0}, "checks": []})
    res.store.raw_write("counters", "c", "rorphan", [("set", "LogSize", 0)])
    assert check_structure(res).passed


# -- baseline negative control -------------------------------------------------------

def test_baseline_overcounts_under_crashes():
    wf = counter_workflow()
    failed = False
    for seed in range(40):
        sc = {"requests": {"ssf": "counter", "count": 10, "args": {"key": "c"},
                           "spread": 10},
              "faults": {"seed": seed, "crash_rate": 0.25,
                         "max_crashes_per_instance": 2,
                         "max_logical_time": 60_000},
              "baseline": True, "checks": []}
        res = run_scenario(wf, sc)
        value = daal.tail_value(res.store, "counters", "c")
        if not res.quiesced or value != 10:
            failed = True
            break
    assert failed  # at least one seed shows the lost guarantee


def test_baseline_fault_free_still_counts():
    wf = counter_workflow()
    sc = {"requests": {"ssf": "counter", "count": 10, "args": {"key": "c"},
                       "spread": 10},
          "faults": {"seed": 0}, "baseline": True, "checks": []}
    res = run_scenario(wf, sc)
    assert res.quiesced
    assert daal.tail_value(res.store, "counters", "c") == 10


# -- CLI ---------------------------------------------------------------------------

def test_cli_run_builtin_counter_small(tmp_path, capsys):
    scenario = dict(BUILTIN_SCENARIOS["counter"])
    scenario["requests"] = {"ssf": "counter", "count": 5, "args": {"key": "c"},
                            "spread": 10}
    sp = tmp_path / "s.json"
    sp.write_text(json.dumps(scenario))
    report = tmp_path / "rep.json"
    dump = tmp_path / "store.jsonl"
    trace = tmp_path / "trace.jsonl"
    code = cli_main(["run", "--workflow", "builtin:counter",
                     "--scenario", str(sp), "--report", str(report),
                     "--dump-store", str(dump), "--trace", str(trace)])
    assert code == 0
    out = capsys.readouterr().out
    assert "exactly-once" in out and "PASS" in out
    reports = json.loads(report.read_text())
    assert reports[0]["passed"] is True
    assert dump.read_text().strip()
    first_trace_line = json.loads(trace.read_text().splitlines()[0])
    assert set(first_trace_line) == {"time", "seq", "kind", "instanceId", "detail"}


def test_cli_seed_range_and_exit_code(tmp_path):
    scenario = {"requests": {"ssf": "counter", "count": 3, "args": {"key": "c"},
                             "spread": 5},
                "faults": {"seed": 0, "crash_rate": 0.2,
                           "max_crashes_per_instance": 2},
                "gc": dict(BUILTIN_SCENARIOS["counter"]["gc"]),
                "checks": ["exactly-once", "structure"]}
    sp = tmp_path / "s.json"
    sp.write_text(json.dumps(scenario))
    code = cli_main(["run", "--workflow", "builtin:counter", "--scenario", str(sp),
                     "--seed-range", "0..2", "--quiet"])
    assert code == 0


def test_cli_baseline_flag_fails_checks(tmp_path):
    scenario = {"requests": {"ssf": "counter", "count": 10, "args": {"key": "c"},
                             "spread": 5},
                "faults": {"seed": 11, "crash_rate": 0.3,
                           "max_crashes_per_instance": 2,
                           "max_logical_time": 60_000},
                "checks": ["exactly-once"]}
    sp = tmp_path / "s.json"
    sp.write_text(json.dumps(scenario))
    codes = set()
    for seed in range(6):
        scenario["faults"]["seed"] = seed
        sp.write_text(json.dumps(scenario))
        codes.add(cli_main(["run", "--workflow", "builtin:counter",
                            "--scenario", str(sp), "--baseline", "--quiet"]))
    assert 1 in codes  # some seed demonstrates the failure


def test_cli_builtins_listing(capsys):
    assert cli_main(["builtins"]) == 0
    out = capsys.readouterr().out
    assert "builtin:travel" in out and "builtin:counter" in out
