"""Cross-SSF transactions: wait-die 2PL over intent-owned locks, shadow
staging, and a cascading commit/abort that walks the call graph.

Locks are owned by a transaction id derived from the owning instance
(plus a per-attempt ordinal), not by a process: a re-executed instance
recognizes its own lock and continues. Writes inside a transaction are
redirected to a per-transaction shadow row set; commit flushes those
values to the real chains under a still-holds-the-lock guard and then
re-invokes the execute-phase callees with the decided context, which is
how the SSFs collectively play the role of a 2PC coordinator. Every
nondeterministic observation the resolution protocol makes (which keys
are shadowed, their values, who owns a contested lock) is pinned
through the read log, so a relaunched instance resumes mid-protocol
with identical decisions.
"""

from __future__ import annotations

from . import daal
from .store import C, U

EXECUTE = "E"
COMMIT = "C"
ABORT = "A"

SKEY_SEP = "\x1f"
ABORT_KEY = "__txnAbort__"

LOCK_WAIT_TICKS = 40    # backoff while waiting out an older lock owner
ABORT_RETRY_TICKS = 60  # per-death cool-down before retrying a killed transaction

class TxnError(Exception):
    pass


class TxnAbortSignal(Exception):
    """Wait-die death or a propagated abort outcome; a control signal,
    not an error. Carries the transaction that must abort."""

    def __init__(self, txn_id, victim_of=None):
        super().__init__(txn_id)
        self.txn_id = txn_id
        self.victim_of = victim_of


class TxnContext:
    __slots__ = ("txn_id", "mode", "start_time")

    def __init__(self, txn_id, mode, start_time):
        self.txn_id = txn_id
        self.mode = mode
        self.start_time = start_time

    def with_mode(self, mode):
        return TxnContext(self.txn_id, mode, self.start_time)

    def to_wire(self):
        return {"id": self.txn_id, "mode": self.mode, "st": self.start_time}

    @classmethod
    def from_wire(cls, d):
        if d is None:
            return None
        return cls(d["id"], d["mode"], d["st"])


def abort_marker(txn_id):
    return {ABORT_KEY: txn_id}


def is_abort_marker(v):
    return isinstance(v, dict) and ABORT_KEY in v


def shadow_skey(table, key):
    return "%s%s%s" % (table, SKEY_SEP, key)


# -- context lifecycle -------------------------------------------------------

def begin_tx(env):
    """Create (or inherit) the top-level transaction context.

    txn id = instance id + attempt ordinal: replay-stable, so the
    re-executed instance matches the locks its predecessor wrote, and
    per-attempt, so a retry after an abort gets clean shadow and lock
    identities while keeping the original creation timestamp (its
    wait-die seniority keeps growing, which guarantees progress).
    """
    if env.txn is not None:
        return env.txn
    env.txn_attempts += 1
    ctx = TxnContext("%s.t%d" % (env.iid, env.txn_attempts), EXECUTE,
                     env.intent_create_time)
    env.txn = ctx
    env.txn_owner = True
    env.sim.record("txnBegin", env.iid,
                   {"txnId": ctx.txn_id, "startTime": ctx.start_time})
    return ctx


def end_tx(env, outcome):
    """Resolve the transaction if this env created it; inner ends are
    ignored. ``outcome`` is "commit" or "abort"."""
    if not env.txn_owner or env.txn is None:
        return
    mode = COMMIT if outcome == "commit" else ABORT
    decided = env.txn.with_mode(mode)
    env.txn = None
    env.txn_owner = False
    yield from resolve_and_cascade(env, decided)
    env.sim.record("txnEnd", env.iid, {"txnId": decided.txn_id, "mode": mode})


def run_transaction(env, body, max_attempts=400):
    """Drive ``body(env)`` inside a transaction, retrying wait-die deaths.

    Returns ("committed", result) or ("aborted", reason). The body runs
    under a fresh context each attempt; raising TxnAbortSignal (or
    returning after a callee aborted) rolls everything back and retries
    with the original seniority. A body that wants a user-level abort
    returns ("abort", reason) explicitly.

    The between-attempt backoff widens with each death and is anchored
    to a logged timestamp: a relaunch replaying old attempts computes an
    already-expired deadline and skips the wait, so replay cost stays a
    few operations per attempt instead of re-sleeping the whole history.
    """
    for _ in range(max_attempts):
        begin_tx(env)
        started = yield from daal.logged_value(env, _pinned_now(env))
        try:
            result = yield from body(env)
        except TxnAbortSignal:
            yield from end_tx(env, "abort")
            target = started + ABORT_RETRY_TICKS * min(env.txn_attempts, 40)
            now = yield from env.now()
            if target > now:
                yield from env.sleep(target - now)
            continue
        if isinstance(result, tuple) and result and result[0] == "abort":
            yield from end_tx(env, "abort")
            return ("aborted", result[1] if len(result) > 1 else None)
        yield from end_tx(env, "commit")
        return ("committed", result)
    raise TxnError("transaction starved after %d attempts" % max_attempts)


def _pinned_now(env):
    def compute():
        t = yield from env.now()
        return t

    return compute


# -- locks -------------------------------------------------------------------

def lock(env, table, key):
    """Acquire the item lock for the current transaction, wait-die style.

    Acquisition is a logged conditional write (owner empty or already
    us), so a replay re-observes its own success. On conflict the owner
    is read through the log and compared by (creation time, txn id):
    an older-or-equal owner kills the requester, a younger one is
    waited out.
    """
    ctx = _require_execute(env)
    while True:  # bounded by the instance lifetime T, enforced by the scheduler
        step = env._step
        ok = yield from daal.cond_update(
            env, table, key,
            [U.set("LockOwner", {"Id": ctx.txn_id, "Time": ctx.start_time})],
            C.or_(C.not_exists("LockOwner"), C.eq("LockOwner.Id", ctx.txn_id)))
        if ok:
            env.sim.record("txnLock", env.iid,
                           {"txnId": ctx.txn_id, "table": table, "key": key,
                            "outcome": "acquired", "step": step})
            return
        owner = yield from daal.logged_value(env, _read_lock_owner(env, table, key))
        if owner is None:
            continue
        if (owner["Time"], owner["Id"]) < (ctx.start_time, ctx.txn_id):
            env.sim.record("txnLock", env.iid,
                           {"txnId": ctx.txn_id, "table": table, "key": key,
                            "outcome": "die", "step": step,
                            "ownerTxnId": owner["Id"], "ownerTime": owner["Time"],
                            "victimTime": ctx.start_time})
            raise TxnAbortSignal(ctx.txn_id, victim_of=owner["Id"])
        env.sim.record("txnLock", env.iid,
                       {"txnId": ctx.txn_id, "table": table, "key": key,
                        "outcome": "wait", "step": step, "ownerTxnId": owner["Id"]})
        # backoff anchored to a logged timestamp: replays of this wait
        # see an expired deadline and fall straight through
        waited_from = yield from daal.logged_value(env, _pinned_now(env))
        now = yield from env.now()
        if waited_from + LOCK_WAIT_TICKS > now:
            yield from env.sleep(waited_from + LOCK_WAIT_TICKS - now)


def _read_lock_owner(env, table, key):
    def compute():
        rows = yield from daal.scan_skeleton(env, table, key)
        try:
            tail = daal.get_tail(rows)
        except daal.MissingHead:
            return None
        row = yield from env.raw_read(table, key, tail)
        if row is None:
            return None
        owner = row.get("LockOwner")
        return dict(owner) if owner else None

    return compute


def unlock(env, table, key):
    """Release via a logged conditional write guarded on ownership; a
    replay after a successful release returns the logged success without
    touching whoever holds the lock now."""
    txn_id = env.txn.txn_id if env.txn else None
    ok = yield from _release(env, table, key, txn_id)
    return ok


def _release(env, table, key, txn_id):
    ok = yield from daal.cond_update(env, table, key, [U.remove("LockOwner")],
                                     C.eq("LockOwner.Id", txn_id))
    return ok


# -- transactional reads and writes -------------------------------------------

def tx_read(env, table, key):
    """Lock, then read: own shadow value if this transaction wrote the
    key, else the real tail. First touch records a lock-only shadow row
    so release can enumerate the full lock set."""
    ctx = _require_execute(env)
    yield from lock(env, table, key)
    skey = shadow_skey(table, key)
    step = env._step
    hit = yield from daal.logged_value(env, _shadow_lookup(env, ctx.txn_id, skey))
    if hit["kind"] == "w":
        val = hit["val"]
        src = "shadow"
    else:
        if hit["kind"] == "none":
            yield from env.raw_cond_write(
                env.t_shadow, ctx.txn_id, skey, C.not_exists("Kind"),
                [U.set("Kind", "l")])
        val = yield from daal.read(env, table, key)
        src = "real"
    env.sim.record("txnRead", env.iid,
                   {"txnId": ctx.txn_id, "table": table, "key": key,
                    "value": val, "source": src, "step": step})
    return val


def _shadow_lookup(env, txn_id, skey):
    def compute():
        row = yield from env.raw_read(env.t_shadow, txn_id, skey)
        if row is None:
            return {"kind": "none", "val": None}
        if row.get("Kind") == "w":
            return {"kind": "w", "val": row.get("Val")}
        return {"kind": "l", "val": None}

    return compute


def tx_write(env, table, key, value):
    """Lock, then stage the value in the shadow row for this (txn, key).
    Replays rewrite identical values, so the raw write needs no log."""
    assert value is not None, "values cannot be None"
    ctx = _require_execute(env)
    yield from lock(env, table, key)
    step = env._step
    yield from env.raw_write(env.t_shadow, ctx.txn_id, shadow_skey(table, key),
                             [U.set("Kind", "w"), U.set("Val", value)])
    env.sim.record("txnWrite", env.iid,
                   {"txnId": ctx.txn_id, "table": table, "key": key,
                    "value": value, "step": step})


def _require_execute(env):
    ctx = env.txn
    if ctx is None or ctx.mode != EXECUTE:
        raise TxnError("operation requires an Execute-mode transaction context")
    return ctx


# -- commit / abort resolution -------------------------------------------------

def resolve_and_cascade(env, ctx):
    """Flush (commit only), release, then notify execute-phase callees.

    Used identically by the transaction owner at end and by any SSF
    invoked with a Commit/Abort context. The shadowed key set, staged
    values, and callee list are read through the log, so a relaunch
    resumes mid-protocol with the same plan; flushes are guarded on
    still holding the lock, which makes duplicate cascade deliveries
    (two parents, or a stale relaunch) harmless no-ops.
    """
    entries = yield from daal.logged_value(env, _shadow_entries(env, ctx.txn_id))
    if ctx.mode == COMMIT:
        for skey, kind in entries:
            if kind != "w":
                continue
            table, key = skey.split(SKEY_SEP, 1)
            val = yield from daal.logged_value(env, _shadow_value(env, ctx.txn_id, skey))
            yield from daal.cond_update(env, table, key, [U.set("Value", val)],
                                        C.eq("LockOwner.Id", ctx.txn_id))
    for skey, _kind in entries:
        table, key = skey.split(SKEY_SEP, 1)
        yield from _release(env, table, key, ctx.txn_id)
    callees = yield from daal.logged_value(env, _execute_phase_callees(env, ctx.txn_id))
    from . import invoke
    for name in callees:
        yield from invoke.sync_invoke(env, name, None, ctx_override=ctx,
                                      cascade=True)
    if env.runtime.mode == "step":
        markers = env.runtime.txn_markers or {}
        if env.ssf != markers.get("end"):
            for succ in _step_cascade_successors(env):
                yield from invoke.sync_invoke(env, succ, None, ctx_override=ctx,
                                              cascade=True)


def _shadow_entries(env, txn_id):
    def compute():
        rows = yield from env.raw_scan(env.t_shadow, C.eq("TxnId", txn_id),
                                       ["Skey", "Kind"])
        return sorted([r["Skey"], r["Kind"]] for r in rows)

    return compute


def _shadow_value(env, txn_id, skey):
    def compute():
        row = yield from env.raw_read(env.t_shadow, txn_id, skey)
        return row.get("Val") if row else None

    return compute


def _execute_phase_callees(env, txn_id):
    def compute():
        rows = yield from env.raw_scan(
            env.t_invoke,
            C.and_(C.eq("TxnId", txn_id), C.eq("TxnMode", EXECUTE)),
            ["Step", "CalleeName"])
        return [r["CalleeName"] for r in sorted(rows, key=lambda r: r["Step"])]

    return compute


def _step_cascade_successors(env):
    markers = env.runtime.txn_markers or {}
    nodes = env.runtime.txn_nodes or set()
    return [s for s in env.runtime.step_successors(env.ssf)
            if s in nodes and s != markers.get("begin")]


# -- step-function transaction markers ----------------------------------------

def step_begin(env, args):
    """Entry marker SSF: mints the context and forwards it downstream."""
    ctx = begin_tx(env)
    value = args.get("inputs", {}) if isinstance(args, dict) else args
    if isinstance(value, dict) and len(value) == 1:
        value = next(iter(value.values()))
    if isinstance(value, dict) and "value" in value:
        value = value["value"]
    return {"ctx": ctx.to_wire(), "value": value}


def step_end(env, args):
    """Exit marker SSF: decides Commit unless any upstream branch sent an
    abort marker, then starts the cascade at the begin marker's
    successors (the second phase of 2PC over the subgraph)."""
    inputs = args.get("inputs", {})
    ctx = None
    aborted = False
    for envelope in inputs.values():
        if isinstance(envelope, dict):
            if envelope.get("ctx"):
                ctx = TxnContext.from_wire(envelope["ctx"])
            if envelope.get("abort"):
                aborted = True
    if ctx is None:
        raise TxnError("step_end received no transaction context")
    decided = ctx.with_mode(ABORT if aborted else COMMIT)
    markers = env.runtime.txn_markers or {}
    begin_name = markers.get("begin")
    from . import invoke
    for succ in sorted(env.runtime.ssfs[begin_name].out_edges):
        yield from invoke.sync_invoke(env, succ, None, ctx_override=decided,
                                      cascade=True)
    env.sim.record("txnEnd", env.iid,
                   {"txnId": decided.txn_id, "mode": decided.mode})
    return {"committed": not aborted, "txnId": decided.txn_id}
