"""Timer-triggered collectors: intent relaunch and log/row garbage collection.

Both run with at-least-once semantics only (no intent of their own, no
exactly-once logging): every write they make is conditional and
idempotent, so a run killed partway is simply redone by a later timer
fire. The garbage collector defers intent-record removal to the very
end so that a crashed run still finds everything it needs to redo the
earlier phases.

Safety rests on the synchrony bound T: an instance execution lives at
most T ticks, so once an intent has been done for longer than T no
execution can still reference its log entries, and once a row has been
disconnected for longer than T no traversal can still be holding it.
"""

from __future__ import annotations

import json

from . import daal
from .runtime import Env, INTENT_SORT
from .store import C, U


def register_collectors(sim, runtime, cfg):
    for ssf in sorted(runtime.ssfs):
        sim.register_timer(cfg.ic_period,
                           _ic_factory(sim, runtime, ssf, cfg), "ic.%s" % ssf)
        sim.register_timer(cfg.gc_period,
                           _gc_factory(sim, runtime, ssf, cfg), "gc.%s" % ssf)


def _ic_factory(sim, runtime, ssf, cfg):
    def factory():
        env = Env(sim, runtime, ssf, sim.next_id("ic.%s" % ssf))
        return intent_collector(env, cfg)

    return factory


def _gc_factory(sim, runtime, ssf, cfg):
    def factory():
        env = Env(sim, runtime, ssf, sim.next_id("gc.%s" % ssf))
        return garbage_collector(env, cfg)

    return factory


# -- cursor bookkeeping --------------------------------------------------------

def _load_cursor(env, collector, table):
    row = yield from env.raw_read(env.runtime.sys(env.ssf)["cursors"],
                                  collector, table)
    if row is None or "Cursor" not in row:
        return None
    return json.loads(row["Cursor"])


def _save_cursor(env, collector, table, cursor):
    cursors = env.runtime.sys(env.ssf)["cursors"]
    if cursor is None:
        yield from env.raw_write(cursors, collector, table, [U.remove("Cursor")])
    else:
        yield from env.raw_write(cursors, collector, table,
                                 [U.set("Cursor", json.dumps(cursor))])


def _paged_all(env, collector, table, filt, projection, cfg):
    """Page through ``table``, resuming from the persisted cursor and
    persisting it after every page, so a run killed partway continues
    where it left off next time. Returns (remaining) rows."""
    cursor = yield from _load_cursor(env, collector, table)
    out = []
    while True:
        rows, nxt = yield from env.paged_scan(table, filt, projection,
                                              cursor, cfg.page_limit)
        yield from _save_cursor(env, collector, table, nxt)
        out.extend(rows)
        if nxt is None:
            return out
        cursor = nxt


# -- intent collector ------------------------------------------------------------

def intent_collector(env, cfg):
    """Relaunch unfinished intents whose last launch is older than the
    backoff. The LastLaunch bump is a compare-and-set, so concurrent
    collector runs relaunch each intent at most once per backoff window."""
    now = yield from env.now()
    rows = yield from _paged_all(env, "ic", env.t_intent, C.eq("Done", False),
                                 ["Id", "LastLaunch"], cfg)
    for r in rows:
        last = r.get("LastLaunch", 0)
        if now - last <= cfg.ic_backoff:
            continue
        won = yield from env.raw_cond_write(
            env.t_intent, r["Id"], INTENT_SORT,
            C.and_(C.eq("Done", False), C.eq("LastLaunch", last)),
            [U.set("LastLaunch", now)])
        if not won:
            continue
        rec = yield from env.raw_read(env.t_intent, r["Id"], INTENT_SORT)
        if rec is None or rec.get("Done") or "Args" not in rec:
            continue
        yield from env.spawn_exec(env.ssf, rec["Args"], iid=r["Id"],
                                  relaunch=True)


# -- garbage collector ------------------------------------------------------------

def garbage_collector(env, cfg):
    """The six-phase sweep: stamp finish times, pick recyclable intents,
    prune their read/invoke log entries, mark-and-disconnect chain rows,
    delete long-dangling unreachable rows, and only then drop the intent
    records themselves."""
    now = yield from env.now()
    # phase 1: stamp newly-done intents
    done_rows = yield from _paged_all(env, "gc.stamp", env.t_intent,
                                      C.eq("Done", True), ["Id", "FinishTime"], cfg)
    for r in done_rows:
        if "FinishTime" not in r:
            yield from env.raw_cond_write(
                env.t_intent, r["Id"], INTENT_SORT,
                C.and_(C.eq("Done", True), C.not_exists("FinishTime")),
                [U.set("FinishTime", now)])
    # phase 2: collect recyclable ids (finished more than T ago)
    recyclable = []
    for r in done_rows:
        ft = r.get("FinishTime")
        if ft is not None and now - ft > cfg.T:
            recyclable.append(r["Id"])
    recyclable_set = set(recyclable)
    # phase 3: drop their read/invoke log entries
    for rid in recyclable:
        yield from env.raw_remove(env.t_read, C.eq("Id", rid))
        yield from env.raw_remove(env.t_invoke, C.eq("Id", rid))
    # phases 4 and 5: per-item chain maintenance
    for table in sorted(env.runtime.ssfs[env.ssf].tables):
        heads = yield from _paged_all(env, "gc.heads.%s" % table, table,
                                      C.eq("RowId", daal.HEAD), ["Key"], cfg)
        for head in heads:
            yield from _collect_chain(env, cfg, table, head["Key"],
                                      recyclable_set, now)
    # shadow rows: consumed once the real lock is gone
    yield from _collect_shadow(env, cfg)
    # phase 6: remove the recyclable intent records last
    for rid in recyclable:
        yield from env.raw_remove(env.t_intent, C.eq("Id", rid))


def _collect_chain(env, cfg, table, key, recyclable_set, now):
    n = env.runtime.n_for(table)
    rows = yield from env.raw_scan(table, C.eq("Key", key))
    by_id = {r["RowId"]: r for r in rows}
    reachable = _reachable(by_id)
    # a stamped row that is back on the chain (re-linked append candidate)
    # must lose its stamp or a later splice could delete it without a
    # fresh T window
    for rid in reachable:
        if "DangleTime" in by_id[rid]:
            yield from env.raw_write(table, key, rid, [U.remove("DangleTime")])
    # mark: delete log entries whose writer intent is recyclable
    remaining = {}
    for rid, row in by_id.items():
        rw = row.get("RecentWrites") or {}
        dead = [k for k in rw if daal.logkey_instance(k) in recyclable_set]
        if dead:
            yield from env.raw_write(table, key, rid,
                                     [U.remove("RecentWrites.%s" % k) for k in dead])
        remaining[rid] = {k: v for k, v in rw.items()
                          if daal.logkey_instance(k) not in recyclable_set}
    # disconnect fully-marked, full, non-tail rows (never the head itself)
    order = _chain_order(by_id)
    for idx, rid in enumerate(order):
        if idx == 0:
            continue
        row = by_id[rid]
        if remaining[rid]:
            continue
        if row.get("LogSize", 0) < n or "NextRow" not in row:
            continue
        prev_id = order[idx - 1]
        yield from env.raw_cond_write(table, key, prev_id,
                                      C.eq("NextRow", rid),
                                      [U.set("NextRow", row["NextRow"])])
        yield from env.raw_cond_write(table, key, rid,
                                      C.not_exists("DangleTime"),
                                      [U.set("DangleTime", now)])
    # stamp unreachable rows (orphans from failed appends, and rows whose
    # splice happened on an already-disconnected predecessor)
    for rid, row in by_id.items():
        if rid not in reachable and "DangleTime" not in row:
            yield from env.raw_cond_write(table, key, rid,
                                          C.not_exists("DangleTime"),
                                          [U.set("DangleTime", now)])
    # phase 5: delete rows dangling for more than T, if still unreachable
    cutoff = now - cfg.T - 1
    fresh = yield from env.raw_scan(table, C.eq("Key", key))
    fresh_reach = _reachable({r["RowId"]: r for r in fresh})
    for r in fresh:
        rid = r["RowId"]
        if rid in fresh_reach or rid == daal.HEAD:
            continue
        dt = r.get("DangleTime")
        if dt is not None and dt <= cutoff:
            yield from env.raw_remove(table, C.and_(
                C.eq("Key", key), C.eq("RowId", rid), C.le("DangleTime", cutoff)))


def _collect_shadow(env, cfg):
    """Shadow rows (head and tail included, unlike data chains) die as
    soon as the real item's lock is no longer held by their transaction:
    release is ordered after flush, so a released lock proves the staged
    value was consumed or abandoned, and the resolution protocol replays
    from its read log rather than from these rows."""
    shadow = env.t_shadow
    rows = yield from _paged_all(env, "gc.shadow", shadow, C.true(),
                                 ["TxnId", "Skey"], cfg)
    checked: dict = {}
    for r in rows:
        txn_id, skey = r["TxnId"], r["Skey"]
        table, key = skey.split("\x1f", 1)
        owner = checked.get((table, key), "?")
        if owner == "?":
            owner = yield from _tail_lock_owner(env, table, key)
            checked[(table, key)] = owner
        if owner is not None and owner.get("Id") == txn_id:
            continue  # transaction still unresolved for this item
        yield from env.raw_remove(shadow, C.and_(C.eq("TxnId", txn_id),
                                                 C.eq("Skey", skey)))


def _tail_lock_owner(env, table, key):
    rows = yield from env.raw_scan(table, C.eq("Key", key),
                                   ["RowId", "NextRow", "LockOwner"])
    by_id = {r["RowId"]: r for r in rows}
    if daal.HEAD not in by_id:
        return None
    cur = daal.HEAD
    seen = set()
    while True:
        seen.add(cur)
        nxt = by_id[cur].get("NextRow")
        if nxt is None or nxt not in by_id or nxt in seen:
            return by_id[cur].get("LockOwner")
        cur = nxt


def _reachable(by_id):
    out = set()
    cur = daal.HEAD
    while cur in by_id and cur not in out:
        out.add(cur)
        cur = by_id[cur].get("NextRow")
    return out


def _chain_order(by_id):
    order = []
    cur = daal.HEAD
    seen = set()
    while cur in by_id and cur not in seen:
        seen.add(cur)
        order.append(cur)
        cur = by_id[cur].get("NextRow")
    return order
