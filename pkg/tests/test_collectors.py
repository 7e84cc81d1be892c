"""Collector behavior: intent relaunch, the six-phase garbage sweep,
two-pass row deletion, concurrent disconnection, orphan recovery."""

from ssfsim import collectors, daal
from ssfsim.harness import run_scenario
from ssfsim.runtime import Env, INTENT_SORT
from ssfsim.sim import GcConfig
from ssfsim.store import C, U

from conftest import DummySim, drive, mini_runtime, mini_store

CFG = GcConfig(T=100, gc_period=60, ic_period=60, ic_backoff=50, page_limit=100)


class CollectorSim(DummySim):
    """Drives collector generators with a controllable clock, capturing
    relaunch spawns."""

    def __init__(self, now):
        super().__init__()
        self.now = now
        self.spawned = []


def run_collector(rt, store, gen, now):
    mode, value = "send", None
    spawned = []
    while True:
        try:
            sc = gen.send(value) if mode == "send" else gen.throw(value)
        except StopIteration:
            return spawned
        mode = "send"
        if sc[0] == "store":
            try:
                value = sc[3](store)
            except Exception as exc:
                mode, value = "throw", exc
        elif sc[0] == "now":
            value = now
        elif sc[0] == "spawn_exec":
            spawned.append((sc[1], sc[2], sc[3]))
            value = (sc[3], -1)
        else:
            value = None


def seed_intent(store, iid, done, last=0, args=None, create=0):
    update = [U.set("Done", done), U.set("Async", False),
              U.set("CreateTime", create), U.set("LastLaunch", last),
              U.set("Args", args or {"kind": "CALL", "args": {}})]
    store.raw_write("app::intent", iid, INTENT_SORT, update)


def env_for(rt, iid="col"):
    return Env(DummySim(), rt, "app", iid)


def fresh(n=16):
    rt = mini_runtime(tables={"data": {"n": n}}, n=n)
    return rt, mini_store(rt)


# -- intent collector ---------------------------------------------------------

def test_ic_no_launches_when_all_done():
    rt, store = fresh()
    seed_intent(store, "a", True)
    seed_intent(store, "b", True)
    spawned = run_collector(rt, store, collectors.intent_collector(env_for(rt), CFG), 1000)
    assert spawned == []


def test_ic_relaunches_stalled_intent_with_original_id_and_args():
    rt, store = fresh()
    args = {"kind": "CALL", "args": {"x": 1}}
    seed_intent(store, "stalled", False, last=0, args=args)
    spawned = run_collector(rt, store, collectors.intent_collector(env_for(rt), CFG), 100)
    assert spawned == [("app", args, "stalled")]
    assert store.raw_read("app::intent", "stalled", INTENT_SORT)["LastLaunch"] == 100


def test_ic_respects_backoff():
    rt, store = fresh()
    seed_intent(store, "young", False, last=80)
    spawned = run_collector(rt, store, collectors.intent_collector(env_for(rt), CFG), 100)
    assert spawned == []  # 100 - 80 <= backoff 50


def test_ic_cas_prevents_double_relaunch():
    """Two concurrent collector runs from the same snapshot: the LastLaunch
    compare-and-set lets exactly one of them spawn, in every interleaving."""
    from ssfsim.sim import enumerate_schedules

    def setup():
        rt, store = fresh()
        seed_intent(store, "stalled", False, last=0)
        spawns = []

        def ic_task(tag):
            def gen():
                rows = yield from collectors._paged_all(
                    env_for(rt, tag), "ic", "app::intent", C.eq("Done", False),
                    ["Id", "LastLaunch"], CFG)
                for r in rows:
                    if 100 - r.get("LastLaunch", 0) <= CFG.ic_backoff:
                        continue
                    won = yield from env_for(rt, tag).raw_cond_write(
                        "app::intent", r["Id"], INTENT_SORT,
                        C.and_(C.eq("Done", False), C.eq("LastLaunch", r["LastLaunch"])),
                        [U.set("LastLaunch", 100)])
                    if won:
                        spawns.append(tag)
                return spawns

            return gen()

        return store, [ic_task("ic1"), ic_task("ic2")]

    def visit(store, results):
        assert len(results[0]) == 1  # exactly one winner per schedule

    runs = enumerate_schedules(setup, visit, max_runs=500_000)
    assert runs > 1


# -- garbage collector ---------------------------------------------------------

def gc_once(rt, store, now, cfg=CFG):
    run_collector(rt, store, collectors.garbage_collector(env_for(rt), cfg), now)


def test_gc_noop_without_done_intents():
    rt, store = fresh()
    seed_intent(store, "live", False)
    drive(store, daal.write(env_for(rt, "live"), "data", "k", 1))
    before = store.dump_jsonl()
    gc_once(rt, store, 1000)
    after = store.dump_jsonl()
    # intent untouched, data untouched (only bookkeeping cursor may differ)
    assert store.raw_read("app::intent", "live", INTENT_SORT)["Done"] is False
    assert daal.tail_value(store, "data", "k") == 1


def test_gc_six_phases_and_two_pass_row_deletion():
    rt, store = fresh(n=2)
    # writer instances fill rows: chain HEAD(2) -> r1(2) -> tail(1)
    for i, iid in enumerate(["w0", "w1", "w2", "w3", "w4"]):
        drive(store, daal.write(env_for(rt, iid), "data", "k", i))
        drive(store, daal.read(env_for(rt, iid), "data", "k"))
        seed_intent(store, iid, True)
    assert len(daal.chain_rows(store, "data", "k")) == 3
    # pass 1 (t=100): stamps finish times only
    gc_once(rt, store, 100)
    assert len(store.raw_scan("app::readlog", C.true())) == 5
    # pass 2 (t=250): recyclable (250-100 > T); logs pruned, full rows
    # disconnected and dangle-stamped, but still present
    gc_once(rt, store, 250)
    assert store.raw_scan("app::readlog", C.true()) == []
    assert store.raw_scan("app::invokelog", C.true()) == []
    chain = daal.chain_rows(store, "data", "k")
    assert [r["RowId"] for r in chain][0] == daal.HEAD
    assert len(chain) == 2  # middle row spliced out: head -> tail
    rows = store.raw_scan("data", C.eq("Key", "k"))
    assert len(rows) == 3  # disconnected rows retained for T
    assert store.raw_scan("app::intent", C.true()) == []  # phase 6
    # pass 3 (t=400): dangling rows older than T deleted; tail never touched
    gc_once(rt, store, 400)
    rows = store.raw_scan("data", C.eq("Key", "k"))
    ids = sorted(r["RowId"] for r in rows)
    assert daal.HEAD in ids
    assert daal.tail_value(store, "data", "k") == 4
    assert len(rows) == 2  # head + the old tail carrying the value


def test_gc_never_deletes_head_or_tail():
    rt, store = fresh(n=2)
    for i, iid in enumerate(["w0", "w1", "w2"]):
        drive(store, daal.write(env_for(rt, iid), "data", "k", i))
        seed_intent(store, iid, True)
    for t in (100, 300, 500, 700):
        gc_once(rt, store, t)
    rows = store.raw_scan("data", C.eq("Key", "k"))
    assert {r["RowId"] for r in rows} >= {daal.HEAD}
    assert daal.tail_value(store, "data", "k") == 2


def test_neighbor_disconnection_second_splice_invisible():
    """A -> X -> Y -> B with two collectors racing: X's splice lands; Y's
    splice hits the now-disconnected X and is invisible; the next run
    disconnects Y permanently."""
    rt, store = fresh(n=1)
    for i, iid in enumerate(["w0", "w1", "w2", "w3"]):
        drive(store, daal.write(env_for(rt, iid), "data", "k", i))
        seed_intent(store, iid, True)
    chain = daal.chain_rows(store, "data", "k")
    assert len(chain) == 4
    head, x, y, tail = [r["RowId"] for r in chain]
    gc_once(rt, store, 100)  # stamp finish times
    # simulate gc1 splicing X, then gc2 (stale snapshot) splicing Y onto X
    store.raw_cond_write("data", "k", head, C.eq("NextRow", x),
                         [U.set("NextRow", y)])
    store.raw_cond_write("data", "k", x, C.eq("NextRow", y),
                         [U.set("NextRow", tail)])
    chain_ids = [r["RowId"] for r in daal.chain_rows(store, "data", "k")]
    assert chain_ids == [head, y, tail]  # Y's disconnection invisible
    # the next real GC run disconnects Y permanently
    gc_once(rt, store, 250)
    chain_ids = [r["RowId"] for r in daal.chain_rows(store, "data", "k")]
    assert chain_ids == [head, tail]


def test_orphan_rows_stamped_then_deleted():
    rt, store = fresh()
    drive(store, daal.write(env_for(rt, "w0"), "data", "k", 1))
    # fabricate an orphan (a crashed append candidate)
    store.raw_write("data", "k", "rorphan", [U.set("LogSize", 0), U.set("Value", 0)])
    gc_once(rt, store, 100)
    orphan = store.raw_read("data", "k", "rorphan")
    assert orphan["DangleTime"] == 100  # stamped, not yet deleted
    gc_once(rt, store, 150)
    assert store.raw_read("data", "k", "rorphan") is not None  # inside T window
    gc_once(rt, store, 250)
    assert store.raw_read("data", "k", "rorphan") is None


def test_relinked_row_loses_its_stamp():
    rt, store = fresh()
    drive(store, daal.write(env_for(rt, "w0"), "data", "k", 1))
    store.raw_write("data", "k", "rcand", [U.set("LogSize", 0), U.set("Value", 1)])
    gc_once(rt, store, 100)  # orphan stamped
    assert store.raw_read("data", "k", "rcand")["DangleTime"] == 100
    # the crashed appender's replay links the candidate
    store.raw_write("data", "k", daal.HEAD, [U.set("NextRow", "rcand")])
    gc_once(rt, store, 250)
    assert "DangleTime" not in store.raw_read("data", "k", "rcand")


def test_gc_shadow_rows_after_lock_release():
    rt, store = fresh()
    from ssfsim import txn
    env = Env(DummySim(), rt, "app", "i1")
    env.intent_create_time = 1
    txn.begin_tx(env)
    drive(store, txn.tx_write(env, "data", "k", 5))
    assert store.raw_scan("app::shadow", C.true())
    gc_once(rt, store, 100)
    assert store.raw_scan("app::shadow", C.true())  # lock held: retained
    drive(store, txn.end_tx(env, "commit"))
    gc_once(rt, store, 200)
    assert store.raw_scan("app::shadow", C.true()) == []


def test_gc_differential_same_outputs_with_and_without():
    """Identical seed with GC on/off: application-visible results match."""
    from ssfsim.harness.apps import counter_workflow
    wf = counter_workflow()
    outs = {}
    for enabled in (True, False):
        sc = {"requests": {"ssf": "counter", "count": 20, "args": {"key": "c"},
                           "spread": 25},
              "faults": {"seed": 77, "crash_rate": 0.0},
              "gc": {"T": 80, "gc_period": 40, "ic_period": 40, "ic_backoff": 60,
                     "enabled": enabled},
              "checks": []}
        res = run_scenario(wf, sc)
        assert res.quiesced
        outs[enabled] = (daal.tail_value(res.store, "counters", "c"),
                         dict(sorted(res.request_results.items())))
    assert outs[True] == outs[False]


def test_crashed_gc_run_redone_safely():
    """Kill the GC mid-run at every prefix; a full later run converges to
    the same cleaned state."""
    def build():
        rt, store = fresh(n=2)
        for i, iid in enumerate(["w0", "w1", "w2", "w3", "w4"]):
            drive(store, daal.write(env_for(rt, iid), "data", "k", i))
            seed_intent(store, iid, True)
        gc_once(rt, store, 100)
        return rt, store

    rt, store = build()
    gc_once(rt, store, 300)
    gc_once(rt, store, 600)
    want = store.dump_jsonl(tables=["data"])
    for cut in range(1, 40):
        rt, store = build()
        gen = collectors.garbage_collector(env_for(rt), CFG)
        mode, value = "send", None
        done = 0
        while done < cut:
            try:
                sc = gen.send(value)
            except StopIteration:
                break
            if sc[0] == "store":
                done += 1
                value = sc[3](store)
            elif sc[0] == "now":
                value = 300
            else:
                value = None
        gen.close()
        gc_once(rt, store, 320)   # redo
        gc_once(rt, store, 600)   # second pass for dangle deletion
        gc_once(rt, store, 900)
        assert store.dump_jsonl(tables=["data"]) == want, cut
