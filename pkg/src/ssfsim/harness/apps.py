"""Built-in example workflows used by the CLI, the checkers, and the
verification suites.

counter    single SSF incrementing one key via a compare-and-set loop
chain      A -> B -> C synchronous chain with an async side branch to D
travel     search -> recommend -> trip{reserveHotel, reserveFlight} with
           the two reservations inside one cross-SSF transaction
rotlock    transactions taking three locks in rotated orders (wait-die)
xy         two transactions over keys x and y whose body loops until
           x == y; only consistent snapshots terminate
stepdemo   step-function workflow with begin/end transaction markers
"""

from __future__ import annotations

from .. import txn
from ..store import C
from .workflow import WorkflowDef, register


# -- counter ------------------------------------------------------------------

@register("builtin.counter")
def counter_handler(env, args):
    key = (args or {}).get("key", "c")
    while True:
        cur = yield from env.read("counters", key)
        nxt = (cur or 0) + 1
        cond = C.not_exists("Value") if cur is None else C.eq("Value", cur)
        ok = yield from env.cond_write("counters", key, nxt, cond)
        if ok:
            return nxt


def counter_workflow():
    return WorkflowDef.from_dict({
        "name": "counter",
        "entry": "counter",
        "ssfs": [{"name": "counter", "handler": "builtin.counter",
                  "tables": {"counters": {}}}],
        "edges": [],
    }).validate()


# -- chain ---------------------------------------------------------------------

@register("builtin.chain_a")
def chain_a(env, args):
    res = yield from env.sync_invoke("chainB", args)
    return {"a": True, "b": res}


@register("builtin.chain_b")
def chain_b(env, args):
    n = (args or {}).get("n", 1)
    cur = yield from env.read("btab", "b")
    yield from env.write("btab", "b", (cur or 0) + n)
    yield from env.async_invoke("chainD", args)
    res = yield from env.sync_invoke("chainC", args)
    return {"b": True, "c": res}


@register("builtin.chain_c")
def chain_c(env, args):
    n = (args or {}).get("n", 1)
    cur = yield from env.read("ctab", "c")
    yield from env.write("ctab", "c", (cur or 0) + n)
    return {"c": True}


@register("builtin.chain_d")
def chain_d(env, args):
    n = (args or {}).get("n", 1)
    cur = yield from env.read("dtab", "d")
    yield from env.write("dtab", "d", (cur or 0) + n)
    return {"d": True}


def chain_workflow():
    return WorkflowDef.from_dict({
        "name": "chain",
        "entry": "chainA",
        "ssfs": [
            {"name": "chainA", "handler": "builtin.chain_a", "tables": {}},
            {"name": "chainB", "handler": "builtin.chain_b", "tables": {"btab": {}}},
            {"name": "chainC", "handler": "builtin.chain_c", "tables": {"ctab": {}}},
            {"name": "chainD", "handler": "builtin.chain_d", "tables": {"dtab": {}}},
        ],
        "edges": [["chainA", "chainB"], ["chainB", "chainC"], ["chainB", "chainD"]],
    }).validate()


# -- travel reservation ----------------------------------------------------------

@register("builtin.travel_search")
def travel_search(env, args):
    res = yield from env.sync_invoke("recommend", args)
    return res


@register("builtin.travel_recommend")
def travel_recommend(env, args):
    choice = dict(args or {})
    choice.setdefault("hotel", "h")
    choice.setdefault("flight", "f")
    res = yield from env.sync_invoke("trip", choice)
    return res


@register("builtin.travel_trip")
def travel_trip(env, args):
    def body(env):
        hotel = yield from env.spawn_sub(
            lambda e: e.sync_invoke("reserveHotel", args))
        flight = yield from env.spawn_sub(
            lambda e: e.sync_invoke("reserveFlight", args))
        hres = yield from env.join(hotel)
        fres = yield from env.join(flight)
        for res in (hres, fres):
            if res[0] != "ok":
                raise txn.TxnAbortSignal(env.txn.txn_id)
            if txn.is_abort_marker(res[1]):
                raise txn.TxnAbortSignal(env.txn.txn_id)
        if not (hres[1].get("ok") and fres[1].get("ok")):
            return ("abort", "sold_out")
        return {"ok": True, "hotel": hres[1], "flight": fres[1]}

    outcome, value = yield from txn.run_transaction(env, body)
    if outcome == "committed":
        return value
    return {"ok": False, "reason": value}


@register("builtin.reserve_hotel")
def reserve_hotel(env, args):
    left = yield from txn.tx_read(env, "hotels", args["hotel"])
    if not left:
        return {"ok": False}
    yield from txn.tx_write(env, "hotels", args["hotel"], left - 1)
    yield from txn.tx_write(env, "hotel_res", "req%s" % args["req"],
                            {"hotel": args["hotel"]})
    return {"ok": True}


@register("builtin.reserve_flight")
def reserve_flight(env, args):
    left = yield from txn.tx_read(env, "flights", args["flight"])
    if not left:
        return {"ok": False}
    yield from txn.tx_write(env, "flights", args["flight"], left - 1)
    yield from txn.tx_write(env, "flight_res", "req%s" % args["req"],
                            {"flight": args["flight"]})
    return {"ok": True}


def travel_workflow():
    return WorkflowDef.from_dict({
        "name": "travel",
        "entry": "search",
        "ssfs": [
            {"name": "search", "handler": "builtin.travel_search",
             "tables": {"catalog": {}}},
            {"name": "recommend", "handler": "builtin.travel_recommend",
             "tables": {}},
            {"name": "trip", "handler": "builtin.travel_trip", "tables": {}},
            {"name": "reserveHotel", "handler": "builtin.reserve_hotel",
             "tables": {"hotels": {"n": 64, "capacity": 16384},
                        "hotel_res": {"n": 64, "capacity": 16384}}},
            {"name": "reserveFlight", "handler": "builtin.reserve_flight",
             "tables": {"flights": {"n": 64, "capacity": 16384},
                        "flight_res": {"n": 64, "capacity": 16384}}},
        ],
        "edges": [["search", "recommend"], ["recommend", "trip"],
                  ["trip", "reserveHotel"], ["trip", "reserveFlight"]],
    }).validate()


# -- rotated lock orders (wait-die) ------------------------------------------------

@register("builtin.rotlock")
def rotlock_handler(env, args):
    keys = ["k0", "k1", "k2"]
    shift = (args or {}).get("shift", 0) % len(keys)
    order = keys[shift:] + keys[:shift]

    def body(env):
        for k in order:
            cur = yield from txn.tx_read(env, "locktab", k)
            yield from txn.tx_write(env, "locktab", k, (cur or 0) + 1)
        return {"ok": True}

    outcome, value = yield from txn.run_transaction(env, body)
    return {"outcome": outcome}


def rotlock_workflow():
    return WorkflowDef.from_dict({
        "name": "rotlock",
        "entry": "rotlock",
        "ssfs": [{"name": "rotlock", "handler": "builtin.rotlock",
                  "tables": {"locktab": {"n": 64, "capacity": 16384}}}],
        "edges": [],
    }).validate()


# -- the x/y consistency workload ---------------------------------------------------

@register("builtin.xy")
def xy_handler(env, args):
    def body(env):
        x = yield from txn.tx_read(env, "xy", "x")
        y = yield from txn.tx_read(env, "xy", "y")
        x = x or 0
        y = y or 0
        iterations = 0
        while x != y:
            x += 1
            iterations += 1
            if iterations > 10_000_000:
                # only an inconsistent snapshot can get here
                raise RuntimeError("x/y loop diverged: x=%d y=%d" % (x, y))
        yield from txn.tx_write(env, "xy", "x", x + 2)
        yield from txn.tx_write(env, "xy", "y", y + 4)
        return {"x": x + 2, "y": y + 4}

    outcome, value = yield from txn.run_transaction(env, body)
    return {"outcome": outcome, "value": value}


def xy_workflow():
    return WorkflowDef.from_dict({
        "name": "xy",
        "entry": "xy",
        "ssfs": [{"name": "xy", "handler": "builtin.xy",
                  "tables": {"xy": {"n": 64, "capacity": 16384}}}],
        "edges": [],
    }).validate()


# -- step-function transaction demo ---------------------------------------------------

@register("builtin.step_begin")
def step_begin_handler(env, args):
    return txn.step_begin(env, args)


@register("builtin.step_end")
def step_end_handler(env, args):
    res = yield from txn.step_end(env, args)
    return res


def _step_value(args):
    inputs = (args or {}).get("inputs", {})
    for envelope in inputs.values():
        if isinstance(envelope, dict) and "value" in envelope:
            return envelope["value"]
    return None


@register("builtin.step_mid1")
def step_mid1(env, args):
    value = _step_value(args) or {}
    cur = yield from txn.tx_read(env, "mid1tab", "m1")
    yield from txn.tx_write(env, "mid1tab", "m1", (cur or 0) + 1)
    if value.get("poison") == "mid1":
        raise txn.TxnAbortSignal(env.txn.txn_id)
    return value


@register("builtin.step_mid2")
def step_mid2(env, args):
    value = _step_value(args) or {}
    cur = yield from txn.tx_read(env, "mid2tab", "m2")
    yield from txn.tx_write(env, "mid2tab", "m2", (cur or 0) + 1)
    if value.get("poison") == "mid2":
        raise txn.TxnAbortSignal(env.txn.txn_id)
    return value


def stepdemo_workflow():
    return WorkflowDef.from_dict({
        "name": "stepdemo",
        "mode": "step",
        "entry": "sbegin",
        "ssfs": [
            {"name": "sbegin", "handler": "builtin.step_begin", "tables": {}},
            {"name": "mid1", "handler": "builtin.step_mid1",
             "tables": {"mid1tab": {"n": 64, "capacity": 16384}}},
            {"name": "mid2", "handler": "builtin.step_mid2",
             "tables": {"mid2tab": {"n": 64, "capacity": 16384}}},
            {"name": "send", "handler": "builtin.step_end", "tables": {}},
        ],
        "edges": [["sbegin", "mid1"], ["mid1", "mid2"], ["mid2", "send"]],
        "txn_markers": {"begin": "sbegin", "end": "send"},
    }).validate()


BUILTIN_WORKFLOWS = {
    "counter": counter_workflow,
    "chain": chain_workflow,
    "travel": travel_workflow,
    "rotlock": rotlock_workflow,
    "xy": xy_workflow,
    "stepdemo": stepdemo_workflow,
}


BUILTIN_SCENARIOS = {
    "counter": {
        "requests": {"ssf": "counter", "count": 100, "args": {"key": "c"},
                     "spread": 16},
        "faults": {"seed": 1, "crash_rate": 0.3, "max_crashes_per_instance": 2},
        "gc": {"T": 400, "gc_period": 400, "ic_period": 100, "ic_backoff": 150},
        "checks": ["exactly-once", "structure"],
    },
    "chain": {
        "requests": [{"ssf": "chainA", "args": {"n": 1}}],
        "faults": {"seed": 7, "crash_rate": 0.2, "max_crashes_per_instance": 2},
        "gc": {"T": 20_000, "gc_period": 8_000, "ic_period": 2_000,
               "ic_backoff": 3_000},
        "idle_time": 12_000,
        "checks": ["exactly-once", "structure"],
    },
    "travel": {
        "requests": {"ssf": "search", "count": 10, "args": {},
                     "args_by_index": {"req": True}, "spread": 40},
        "initial": {"hotels": {"h": 5}, "flights": {"f": 5}},
        "faults": {"seed": 3, "crash_rate": 0.2, "max_crashes_per_instance": 2,
                   "max_logical_time": 3_000_000},
        "gc": {"T": 100_000, "gc_period": 25_000, "ic_period": 8_000,
               "ic_backoff": 12_000},
        "idle_time": 45_000,
        "checks": ["structure", "atomicity", "serializability"],
    },
    "rotlock": {
        "requests": {"ssf": "rotlock", "count": 3, "args": {},
                     "args_by_index": {"shift": True}},
        "faults": {"seed": 5},
        "gc": {"T": 50_000, "gc_period": 20_000, "ic_period": 6_000,
               "ic_backoff": 9_000},
        "idle_time": 32_000,
        "checks": ["structure", "serializability"],
    },
    "xy": {
        "requests": [{"ssf": "xy", "args": {}}, {"ssf": "xy", "args": {}}],
        "initial": {"xy": {"x": 0, "y": 1}},
        "faults": {"seed": 11},
        "gc": {"T": 50_000, "gc_period": 20_000, "ic_period": 6_000,
               "ic_backoff": 9_000},
        "idle_time": 32_000,
        "checks": ["structure", "opacity", "serializability"],
    },
    "stepdemo": {
        "requests": [{"ssf": "sbegin", "args": {}}],
        "faults": {"seed": 2},
        "gc": {"T": 50_000, "gc_period": 20_000, "ic_period": 6_000,
               "ic_backoff": 9_000},
        "idle_time": 32_000,
        "checks": ["structure"],
    },
}
