"""Linked write-log rows and the exactly-once operation wrappers.

Every item lives in a chain of rows: the immortal head, zero or more
filled log rows, and the tail, which carries the current value. Each
row collocates up to N log entries (``RecentWrites``: log key -> the
operation's boolean outcome) with the value, so applying an operation
and recording that it was applied is one atomic conditional write.

A log key is ``(instance id, step)`` rendered as ``"id#step"``; replays
of an instance recompute the same step numbers, find their log key
already present, and return the recorded outcome instead of reapplying.

The conditional write on a candidate tail distinguishes four row
states: the entry is already logged (A), there is room to apply and log
(B, split into B1/B2 for user conditions), the row is full and chained
(C), or full and unchained (D, append a new row). State B is checked
first with a single guarded write because no concurrent transition
leads back into it; the remaining states are told apart from a plain
read.
"""

from __future__ import annotations

import hashlib
import json

from .store import C, U

HEAD = "HEAD"


class MissingHead(Exception):
    """Chain traversal found no head row for the item."""


def logkey_str(logkey) -> str:
    return "%s#%d" % logkey


def logkey_instance(entry_key: str) -> str:
    return entry_key.rsplit("#", 1)[0]


# -- traversal ---------------------------------------------------------------

def scan_skeleton(env, table, key, extra=()):
    """One scan, projected to RowId/NextRow (plus ``extra`` paths),
    assembled into a local skeleton of the chain."""
    projection = ["RowId", "NextRow"] + list(extra)
    rows = yield from env.raw_scan(table, C.eq("Key", key), projection)
    return rows


def get_tail(skeleton) -> str:
    """RowId of the first head-reachable row without a NextRow.

    A NextRow pointing at a row missing from the scan (a mid-append
    snapshot) terminates the walk there; the guarded write that follows
    re-resolves the real state.
    """
    by_id = {}
    for r in skeleton:
        rid = r.get("RowId")
        if rid is not None:
            by_id[rid] = r
    if HEAD not in by_id:
        raise MissingHead()
    cur = HEAD
    seen = set()
    while True:
        seen.add(cur)
        nxt = by_id[cur].get("NextRow")
        if nxt is None or nxt not in by_id or nxt in seen:
            return cur
        cur = nxt


def _find_logged(skeleton, entry_key):
    """(found, outcome) for a log entry anywhere in the scan, reachable
    or not; a disconnected row still proves the operation happened."""
    for r in skeleton:
        rw = r.get("RecentWrites")
        if rw and entry_key in rw:
            return True, rw[entry_key]
    return False, None


def _tail_or_bootstrap(env, table, key, skeleton):
    """Tail row id, creating the immortal head if the key is new."""
    try:
        return get_tail(skeleton)
    except MissingHead:
        pass
    yield from env.raw_cond_write(table, key, HEAD, C.not_exists("RowId"),
                                  [U.set("LogSize", 0)])
    return HEAD


# -- read --------------------------------------------------------------------

def read(env, table, key):
    """Tail value as of some point during the call, recorded in the read
    log so replays of this step return the same value."""
    skeleton = yield from scan_skeleton(env, table, key)
    val = None
    try:
        tail = get_tail(skeleton)
    except MissingHead:
        tail = None
    if tail is not None:
        row = yield from env.raw_read(table, key, tail)
        if row is not None:
            val = row.get("Value")
    iid, step = env.next_logkey()
    update = [U.set("Value", val)] if val is not None else []
    ok = yield from env.raw_cond_write(env.t_read, iid, step,
                                       C.not_exists("Id"), update)
    if ok:
        return val
    logged = yield from env.raw_read(env.t_read, iid, step)
    return logged.get("Value") if logged else None


def logged_value(env, compute):
    """Pin an arbitrary computed value into the read log.

    ``compute`` is a generator performing raw reads; its JSON-encodable
    result is recorded under this step's log key, so re-executions see
    the original value even if the underlying rows have since changed
    or been collected. This is the general determinism device: anything
    nondeterministic an instance observes must flow through here or a
    logged wrapper.
    """
    iid, step = env.next_logkey()
    existing = yield from env.raw_read(env.t_read, iid, step)
    if existing is not None:
        return json.loads(existing["Json"])
    val = yield from compute()
    blob = json.dumps(val, sort_keys=True, separators=(",", ":"))
    ok = yield from env.raw_cond_write(env.t_read, iid, step,
                                       C.not_exists("Id"), [U.set("Json", blob)])
    if ok:
        return val
    logged = yield from env.raw_read(env.t_read, iid, step)
    return json.loads(logged["Json"])


# -- write -------------------------------------------------------------------

def write(env, table, key, value):
    """Apply ``value`` at the tail and log it, atomically, exactly once
    across every execution sharing this step's log key."""
    assert value is not None, "values cannot be None"
    iid, step = env.next_logkey()
    entry_key = logkey_str((iid, step))
    skeleton = yield from scan_skeleton(
        env, table, key, extra=("RecentWrites.%s" % entry_key,))
    found, _ = _find_logged(skeleton, entry_key)
    if found:
        return
    tail = yield from _tail_or_bootstrap(env, table, key, skeleton)
    yield from _try_write(env, table, key, value, tail, entry_key)


def _try_write(env, table, key, value, row_id, entry_key):
    n = env.runtime.n_for(table)
    while True:
        guard = C.and_(C.not_(C.in_map("RecentWrites", entry_key)),
                       C.lt("LogSize", n),
                       C.not_exists("NextRow"))
        ok = yield from env.raw_cond_write(
            table, key, row_id, guard,
            [U.set("Value", value), U.increment("LogSize", 1),
             U.set_map_entry("RecentWrites", entry_key, True)])
        if ok:
            return  # case B
        row = yield from env.raw_read(table, key, row_id)
        if row is None:
            skeleton = yield from scan_skeleton(
                env, table, key, extra=("RecentWrites.%s" % entry_key,))
            found, _ = _find_logged(skeleton, entry_key)
            if found:
                return
            row_id = yield from _tail_or_bootstrap(env, table, key, skeleton)
            continue
        rw = row.get("RecentWrites")
        if rw and entry_key in rw:
            return  # case A
        if "NextRow" not in row:
            row_id = yield from _append_row(env, table, key, row, entry_key)  # D
        else:
            row_id = row["NextRow"]  # C


def cond_write(env, table, key, value, cond):
    """Write gated on a user condition over the tail row's attributes;
    the boolean outcome is what gets logged and replayed."""
    assert value is not None, "values cannot be None"
    ok = yield from cond_update(env, table, key, [U.set("Value", value)], cond)
    return ok


def cond_update(env, table, key, actions, cond):
    """Exactly-once conditional update of arbitrary tail attributes.

    The first serialized attempt evaluates ``cond`` against the tail
    and either applies ``actions`` plus the log entry (true outcome) or
    logs a false outcome without touching anything else; every replay
    returns the logged boolean. Lock acquisition and release ride on
    this with actions over the LockOwner column.
    """
    iid, step = env.next_logkey()
    entry_key = logkey_str((iid, step))
    skeleton = yield from scan_skeleton(
        env, table, key, extra=("RecentWrites.%s" % entry_key,))
    found, outcome = _find_logged(skeleton, entry_key)
    if found:
        return bool(outcome)
    tail = yield from _tail_or_bootstrap(env, table, key, skeleton)
    ok = yield from _try_cond_update(env, table, key, actions, cond, tail, entry_key)
    return ok


def _try_cond_update(env, table, key, actions, cond, row_id, entry_key):
    n = env.runtime.n_for(table)
    while True:
        guard = C.and_(C.not_(C.in_map("RecentWrites", entry_key)),
                       C.lt("LogSize", n),
                       C.not_exists("NextRow"))
        ok = yield from env.raw_cond_write(
            table, key, row_id, C.and_(cond, guard),
            list(actions) + [U.increment("LogSize", 1),
                             U.set_map_entry("RecentWrites", entry_key, True)])
        if ok:
            return True  # case B1: condition held at the serialization point
        ok = yield from env.raw_cond_write(
            table, key, row_id, guard,
            [U.increment("LogSize", 1),
             U.set_map_entry("RecentWrites", entry_key, False)])
        if ok:
            return False  # case B2: condition was false when it mattered
        row = yield from env.raw_read(table, key, row_id)
        if row is None:
            skeleton = yield from scan_skeleton(
                env, table, key, extra=("RecentWrites.%s" % entry_key,))
            found, outcome = _find_logged(skeleton, entry_key)
            if found:
                return bool(outcome)
            row_id = yield from _tail_or_bootstrap(env, table, key, skeleton)
            continue
        rw = row.get("RecentWrites")
        if rw and entry_key in rw:
            return bool(rw[entry_key])  # case A
        if "NextRow" not in row:
            row_id = yield from _append_row(env, table, key, row, entry_key)  # D
        else:
            row_id = row["NextRow"]  # C


# -- chain growth ------------------------------------------------------------

def _append_row(env, table, key, prev_row, entry_key):
    """Append a fresh row after a full one and return the row to retry on.

    The candidate row id is a hash of (key, log key, predecessor), so a
    replayed append at the same spot recreates the same candidate
    instead of orphaning a second one, while a replay whose chain has
    moved on mints a fresh candidate rather than resurrecting a stale
    one (the old orphan carries an old value copy and must never be
    linked behind a newer row). Creation and linking are separate
    idempotent conditional writes; losing the link race means adopting
    the winner's row and leaving the candidate for the collector's
    unreachable-row pass. The value and lock owner are carried forward:
    the previous row is full, so both are immutable there.
    """
    digest = hashlib.sha256(
        ("%s|%s|%s" % (key, entry_key, prev_row["RowId"])).encode()).hexdigest()
    new_id = "r%s" % digest[:16]
    init = [U.set("LogSize", 0)]
    val = prev_row.get("Value")
    if val is not None:
        init.append(U.set("Value", val))
    lock = prev_row.get("LockOwner")
    if lock is not None:
        init.append(U.set("LockOwner", dict(lock)))
    yield from env.raw_cond_write(table, key, new_id, C.not_exists("RowId"), init)
    linked = yield from env.raw_cond_write(table, key, prev_row["RowId"],
                                           C.not_exists("NextRow"),
                                           [U.set("NextRow", new_id)])
    if linked:
        return new_id
    prev = yield from env.raw_read(table, key, prev_row["RowId"])
    return prev["NextRow"]


# -- direct store helpers (setup and checkers, not instance code) ------------

def seed_value(store, table, key, value):
    """Initialize an item out-of-band (scenario setup)."""
    store.raw_cond_write(table, key, HEAD, C.not_exists("RowId"),
                         [U.set("LogSize", 0), U.set("Value", value)])


def chain_rows(store, table, key):
    """Head-reachable chain of full rows, in order (checker helper)."""
    rows = {r["RowId"]: r for r in store.raw_scan(table, C.eq("Key", key))}
    if HEAD not in rows:
        return []
    out = []
    cur = HEAD
    seen = set()
    while cur is not None and cur in rows and cur not in seen:
        seen.add(cur)
        out.append(rows[cur])
        cur = rows[cur].get("NextRow")
    return out


def tail_value(store, table, key):
    chain = chain_rows(store, table, key)
    return chain[-1].get("Value") if chain else None


def all_keys(store, table):
    return sorted(r["Key"] for r in store.raw_scan(table, C.eq("RowId", HEAD), ["Key"]))
