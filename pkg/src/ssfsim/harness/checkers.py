"""Oracle checkers: pure functions from (trace, dumps) to pass/fail reports.

Each checker is deterministic over its inputs and attaches a
counterexample on failure. The serializability and opacity checkers
brute-force serial orders, so they are intended for histories with at
most a handful of committed transactions; the exactly-once checker
compares application-visible state against a fault-free sequential
reference run of the same requests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .. import daal
from ..store import C


@dataclass
class CheckReport:
    checker: str
    passed: bool
    counterexample: dict | None = None
    stats: dict = field(default_factory=dict)

    def line(self):
        return "%-16s %s%s" % (
            self.checker, "PASS" if self.passed else "FAIL",
            "" if self.passed else "  %r" % (self.counterexample,))


def _fail(name, counterexample, **stats):
    return CheckReport(name, False, counterexample, dict(stats))


def _ok(name, **stats):
    return CheckReport(name, True, None, dict(stats))


def data_values(store, runtime):
    """Application-visible state: tail value per key per data table."""
    out = {}
    for name in sorted(runtime.ssfs):
        for table in sorted(runtime.ssfs[name].tables):
            vals = {}
            for key in daal.all_keys(store, table):
                vals[key] = daal.tail_value(store, table, key)
            out[table] = vals
    return out


def check_exactly_once(result, reference) -> CheckReport:
    """Final application state equals the serialized fault-free reference
    and no log key was ever applied twice anywhere."""
    name = "exactly-once"
    if not result.quiesced:
        return _fail(name, {"reason": "run did not quiesce"})
    if result.store.logkey_violations:
        return _fail(name, {"reason": "log key applied twice",
                            "violations": result.store.logkey_violations[:3]})
    got = data_values(result.store, result.runtime)
    want = data_values(reference.store, reference.runtime)
    if got != want:
        diff = {}
        for table in set(got) | set(want):
            if got.get(table) != want.get(table):
                diff[table] = {"got": got.get(table), "want": want.get(table)}
        return _fail(name, {"reason": "state mismatch", "diff": diff})
    return _ok(name, tables=len(got))


def check_structure(result, quiescent=False) -> CheckReport:
    """Chain well-formedness over the final dump: immortal heads, acyclic
    forward chains, log sizes within N, no reachable pointer at a deleted
    row, and (when the run is known quiescent) no lock owner left on any
    tail and no dangling chain state."""
    name = "structure"
    store, runtime = result.store, result.runtime
    chains = 0
    for sname in sorted(runtime.ssfs):
        for table in sorted(runtime.ssfs[sname].tables):
            n = runtime.n_for(table)
            rows = store.raw_scan(table, C.true())
            by_key: dict = {}
            for r in rows:
                by_key.setdefault(r["Key"], {})[r["RowId"]] = r
            for key, by_id in sorted(by_key.items()):
                if daal.HEAD not in by_id:
                    return _fail(name, {"table": table, "key": key,
                                        "reason": "no head row"})
                cur = daal.HEAD
                seen = set()
                while True:
                    row = by_id[cur]
                    seen.add(cur)
                    if row.get("LogSize", 0) > n:
                        return _fail(name, {"table": table, "key": key,
                                            "row": cur, "reason": "LogSize over N"})
                    if len(row.get("RecentWrites") or {}) > row.get("LogSize", 0):
                        return _fail(name, {"table": table, "key": key, "row": cur,
                                            "reason": "more entries than LogSize"})
                    nxt = row.get("NextRow")
                    if nxt is None:
                        break
                    if nxt in seen:
                        return _fail(name, {"table": table, "key": key,
                                            "reason": "cycle", "row": cur})
                    if nxt not in by_id:
                        return _fail(name, {"table": table, "key": key, "row": cur,
                                            "reason": "reachable NextRow dangles",
                                            "next": nxt})
                    cur = nxt
                chains += 1
                if quiescent:
                    tail = by_id[cur]
                    if tail.get("LockOwner") is not None:
                        return _fail(name, {"table": table, "key": key,
                                            "reason": "lock held after quiescence",
                                            "owner": tail["LockOwner"]})
    return _ok(name, chains=chains)


def check_quiescent_cleanup(result, heads_only=True) -> CheckReport:
    """Memory-leak freedom after drain: no intent rows, no read/invoke log
    rows, no shadow rows, and every chain reduced to its minimal form
    (a bare head when nothing ever overflowed, else head plus tail)."""
    name = "quiescent-cleanup"
    store, runtime = result.store, result.runtime
    from ..runtime import system_tables
    for sname in sorted(runtime.ssfs):
        sys_t = system_tables(sname)
        for label in ("intent", "read", "invoke", "shadow"):
            rows = store.raw_scan(sys_t[label], C.true())
            if rows:
                return _fail(name, {"ssf": sname, "log": label,
                                    "reason": "rows left", "count": len(rows)})
        for table in sorted(runtime.ssfs[sname].tables):
            rows = store.raw_scan(table, C.true())
            by_key: dict = {}
            for r in rows:
                by_key.setdefault(r["Key"], []).append(r)
            for key, rws in sorted(by_key.items()):
                limit = 1 if heads_only else 2
                if len(rws) > limit:
                    return _fail(name, {"table": table, "key": key,
                                        "reason": "chain not minimal",
                                        "rows": len(rws)})
                for r in rws:
                    if r.get("RecentWrites"):
                        return _fail(name, {"table": table, "key": key,
                                            "reason": "log entries left",
                                            "row": r["RowId"]})
    return _ok(name)


def check_atomicity(result, left_table, right_table) -> CheckReport:
    """Paired-effect atomicity: the committed record sets of two tables
    written only inside one transaction must coincide exactly (no
    half-pairs survive any fault schedule)."""
    name = "atomicity"
    left = set(daal.all_keys(result.store, left_table))
    right = set(daal.all_keys(result.store, right_table))
    left = {k for k in left if daal.tail_value(result.store, left_table, k) is not None}
    right = {k for k in right if daal.tail_value(result.store, right_table, k) is not None}
    if left != right:
        return _fail(name, {"reason": "unpaired reservations",
                            "only_left": sorted(left - right),
                            "only_right": sorted(right - left)})
    return _ok(name, pairs=len(left))


# -- transaction history checking ------------------------------------------------

def _txn_history(events):
    """Group txn events into per-transaction records.

    Replayed executions re-record their operations with identical step
    numbers, so ops are deduplicated by step and ordered by it; the step
    partitioning gives parallel branch ops disjoint, stable positions.
    """
    txns: dict = {}
    order = []
    for time_, seq, kind, iid, detail in events:
        if not kind.startswith("txn"):
            continue
        tid = detail["txnId"]
        if tid not in txns:
            txns[tid] = {"id": tid, "begin": None, "end": None, "mode": None,
                         "_ops": {}, "start_time": None}
            order.append(tid)
        t = txns[tid]
        if kind == "txnBegin":
            if t["begin"] is None:
                t["begin"] = (time_, seq)
            t["start_time"] = detail.get("startTime")
        elif kind == "txnEnd":
            if t["end"] is None:
                t["end"] = (time_, seq)
                t["mode"] = detail.get("mode")
        elif kind == "txnRead":
            t["_ops"].setdefault((iid, detail["step"]), (
                (time_, seq), ("r", detail["table"], detail["key"], detail["value"])))
        elif kind == "txnWrite":
            t["_ops"].setdefault((iid, detail["step"]), (
                (time_, seq), ("w", detail["table"], detail["key"], detail["value"])))
    out = []
    for tid in order:
        t = txns[tid]
        t["ops"] = [op for _, op in sorted(t["_ops"].values())]
        del t["_ops"]
        out.append(t)
    return out


def _replay_serial(order, initial):
    """Run transactions one at a time over ``initial``; return None if
    every read matches, else the first mismatch."""
    state = dict(initial)
    for t in order:
        for op in t["ops"]:
            kind, table, key, value = op
            k = (table, key)
            if kind == "r":
                have = state.get(k)
                if have != value:
                    return {"txn": t["id"], "key": list(k),
                            "read": value, "expected": have}
            else:
                state[k] = value
    return None


def _serial_state(order, initial):
    state = dict(initial)
    for t in order:
        for op in t["ops"]:
            if op[0] == "w":
                state[(op[1], op[2])] = op[3]
    return state


def _consistent_orders(committed, initial):
    """All real-time-respecting serial orders under which every committed
    transaction's reads replay exactly."""
    out = []
    for perm in itertools.permutations(committed):
        ok = True
        for i, a in enumerate(perm):
            for b in perm[i + 1:]:
                # b must not have ended before a began
                if b["end"] and a["begin"] and b["end"] < a["begin"]:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        if _replay_serial(perm, initial) is None:
            out.append(perm)
    return out


def check_serializability(events, initial=None, final=None,
                          name="serializability") -> CheckReport:
    """Committed transactions must be equivalent to some serial order
    consistent with real time (exhaustive search; use on small histories).
    If ``final`` state is supplied it must match that order's outcome."""
    initial = dict(initial or {})
    history = _txn_history(events)
    committed = [t for t in history if t["mode"] == "C"]
    if len(committed) > 7:
        return _fail(name, {"reason": "history too large to brute force",
                            "committed": len(committed)})
    orders = _consistent_orders(committed, initial)
    if not orders:
        return _fail(name, {"reason": "no consistent serial order",
                            "committed": [t["id"] for t in committed]})
    if final is not None:
        matching = [o for o in orders
                    if all(final.get(k) == v for k, v in _serial_state(o, initial).items())]
        if not matching:
            return _fail(name, {"reason": "final state matches no serial order"})
        orders = matching
    return _ok(name, committed=len(committed), orders=len(orders))


def check_opacity(events, initial=None) -> CheckReport:
    """Serializability plus: every transaction, aborted ones included,
    read from a committed-prefix snapshot (with its own writes applied),
    so no execution ever observed a mid-transaction state."""
    initial = dict(initial or {})
    history = _txn_history(events)
    committed = [t for t in history if t["mode"] == "C"]
    if len(committed) > 7:
        return _fail("opacity", {"reason": "history too large to brute force"})
    orders = _consistent_orders(committed, initial)
    if not orders:
        return _fail("opacity", {"reason": "no consistent serial order"})
    aborted = [t for t in history if t["mode"] != "C"]
    for t in aborted:
        if not t["ops"]:
            continue
        if not _prefix_consistent(t, orders, initial):
            return _fail("opacity", {"reason": "aborted txn read no snapshot",
                                     "txn": t["id"], "ops": t["ops"][:6]})
    return _ok("opacity", committed=len(committed), aborted=len(aborted))


def _prefix_consistent(t, orders, initial):
    for order in orders:
        for cut in range(len(order) + 1):
            # a transaction must not see writers that ended after it did
            prefix = order[:cut]
            if t["end"]:
                if any(p["end"] and p["end"] > t["end"] for p in prefix):
                    continue
            if _replay_serial([p for p in prefix] + [t], initial) is None:
                return True
    return False
