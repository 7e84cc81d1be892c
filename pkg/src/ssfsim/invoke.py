"""Exactly-once cross-SSF invocation and the per-instance stub.

An invocation step mints the callee's instance id once, guarded by the
invoke log, so every re-execution of the caller re-invokes the same
callee instance. The authoritative result travels backwards through a
*callback*: before the callee marks itself done it writes its result
into the caller's invoke log via a fresh caller-side instance (routing
is stateless, so "some instance of the caller" is exactly right). The
callee's direct return value is just an optimization; if it is lost,
either the caller retries with the same callee id or its own collector
relaunches it and the replay finds the result already logged.

Wire payload: {kind, calleeId, args, ctx?, caller, async?} with kind in
{CALL, SYNC_CALLBACK, ASYNC_CALLBACK, ASYNC_REG}.
"""

from __future__ import annotations

from . import txn as _txn
from .runtime import Env, BaselineEnv, INTENT_SORT
from .store import C, U

CALL = "CALL"
SYNC_CALLBACK = "SYNC_CALLBACK"
ASYNC_CALLBACK = "ASYNC_CALLBACK"
ASYNC_REG = "ASYNC_REG"

INVOKE_RETRIES = 8
CALLBACK_RETRIES = 25


class CalleeUnavailable(Exception):
    """The callee kept failing and no callback arrived within this
    execution; the caller dies and its collector finishes the job."""


def _wrap(result):
    # results live in a one-entry map so "present but None" stays distinct
    return {"v": result}


def _unwrap(wrapped):
    return wrapped.get("v") if isinstance(wrapped, dict) else wrapped


def make_runner(runtime):
    def runner(sim, ssf, payload, iid):
        return run_execution(sim, runtime, ssf, payload, iid)

    return runner


def run_execution(sim, runtime, ssf, payload, iid):
    """One execution of an SSF instance (original launch or relaunch)."""
    env = (BaselineEnv if runtime.baseline else Env)(sim, runtime, ssf, iid)
    kind = payload.get("kind", CALL)
    if runtime.baseline:
        result = yield from _run_handler(env, runtime.handler(ssf), payload.get("args"))
        return result
    if kind in (SYNC_CALLBACK, ASYNC_CALLBACK):
        yield from _callback_handler(env, payload)
        return None
    if kind == ASYNC_REG:
        result = yield from _async_registration(env, payload)
        return result
    if payload.get("async"):
        result = yield from _async_stub(env, payload)
        return result
    result = yield from _call_stub(env, payload)
    return result


# -- the instance stub ---------------------------------------------------------

def _call_stub(env, payload):
    """Register the intent, run the body (or the commit/abort protocol),
    call back, mark done. Every piece is idempotent under relaunch."""
    now = yield from env.now()
    created = yield from env.raw_cond_write(
        env.t_intent, env.iid, INTENT_SORT, C.not_exists("Id"),
        [U.set("Done", False), U.set("Async", False),
         U.set("Args", payload), U.set("CreateTime", now),
         U.set("LastLaunch", now)])
    if created:
        rec = {"Done": False, "CreateTime": now}
    else:
        rec = yield from env.raw_read(env.t_intent, env.iid, INTENT_SORT)
        if rec is None:
            # intent collected: every live replay window has passed, so
            # this execution's work is complete elsewhere; do nothing
            return None
    env.intent_create_time = rec["CreateTime"]
    ctx = _txn.TxnContext.from_wire(payload.get("ctx"))
    if rec.get("Done"):
        result = _unwrap(rec.get("Ret"))
    elif ctx is not None and ctx.mode != _txn.EXECUTE:
        result = yield from _txn.resolve_and_cascade(env, ctx)
        result = "ok"
    else:
        if ctx is not None:
            env.txn = ctx
            env.txn_owner = False
        args = payload.get("args")
        if env.runtime.mode == "step":
            args, skipped = _step_preprocess(env, args)
            if skipped is not None:
                result = skipped
            else:
                result = yield from _run_body(env, args)
                result = _step_envelope(env, result)
        else:
            result = yield from _run_body(env, args)
    caller = payload.get("caller")
    if caller is not None:
        yield from _callback_loop(env, caller, env.iid, result)
    yield from env.raw_cond_write(env.t_intent, env.iid, INTENT_SORT,
                                  C.exists("Id"),
                                  [U.set("Done", True), U.set("Ret", _wrap(result))])
    return result


def _run_body(env, args):
    try:
        result = yield from _run_handler(env, env.runtime.handler(env.ssf), args)
    except _txn.TxnAbortSignal as sig:
        result = _txn.abort_marker(sig.txn_id)
    return result


def _run_handler(env, handler, args):
    out = handler(env, args)
    if hasattr(out, "__next__"):
        out = yield from out
    return out


def _step_preprocess(env, args):
    """Step-function plumbing: pull the transaction context out of the
    routed inputs and short-circuit abort markers downstream."""
    if not isinstance(args, dict) or "inputs" not in args:
        return args, None
    markers = env.runtime.txn_markers or {}
    ctx = None
    aborted = False
    for envelope in args["inputs"].values():
        if isinstance(envelope, dict):
            if envelope.get("ctx"):
                ctx = _txn.TxnContext.from_wire(envelope["ctx"])
            if envelope.get("abort"):
                aborted = True
    if env.ssf == markers.get("end"):
        return args, None  # the end marker inspects markers itself
    if aborted:
        out = {"abort": True}
        if ctx is not None:
            out["ctx"] = ctx.to_wire()
        return args, out
    if ctx is not None and env.ssf in env.runtime.txn_nodes:
        env.txn = ctx
        env.txn_owner = False
    return args, None


def _step_envelope(env, result):
    """Wrap a step-mode node's output for routing: carry the transaction
    context forward, convert an abort signal into a downstream marker."""
    markers = env.runtime.txn_markers or {}
    if env.ssf in (markers.get("begin"), markers.get("end")):
        return result  # marker handlers build their own envelopes
    if _txn.is_abort_marker(result):
        out = {"abort": True}
        if env.txn is not None:
            out["ctx"] = env.txn.to_wire()
        return out
    if env.txn is not None:
        return {"ctx": env.txn.to_wire(), "value": result}
    return {"value": result}


def _async_stub(env, payload):
    """Body of an asynchronous callee: refuse to run unless the intent
    was registered first (the registration round-trip guarantees the
    collector knows about us before any effect happens)."""
    rec = yield from env.raw_read(env.t_intent, env.iid, INTENT_SORT)
    if rec is None or rec.get("Done"):
        return None
    env.intent_create_time = rec["CreateTime"]
    result = yield from _run_body(env, payload.get("args"))
    yield from env.raw_cond_write(env.t_intent, env.iid, INTENT_SORT,
                                  C.exists("Id"),
                                  [U.set("Done", True), U.set("Ret", _wrap(result))])
    return result


def _async_registration(env, payload):
    """Idempotently log the async callee's intent, then confirm to the
    caller via callback. Runs as a throwaway callee-side instance."""
    now = yield from env.now()
    fire_payload = {"kind": CALL, "async": True, "calleeId": payload["calleeId"],
                    "args": payload.get("args")}
    yield from env.raw_cond_write(
        env.t_intent, payload["calleeId"], INTENT_SORT, C.not_exists("Id"),
        [U.set("Done", False), U.set("Async", True),
         U.set("Args", fire_payload), U.set("CreateTime", now),
         U.set("LastLaunch", now)])
    yield from _callback_loop(env, payload["caller"], payload["calleeId"], True,
                              kind=ASYNC_CALLBACK)
    return True


def _callback_handler(env, payload):
    """Write the callee's result into this SSF's invoke log. At-least-once
    is enough: a duplicate rewrites the identical value, and a callback
    for an entry that no longer exists (caller already collected) is
    detected and ignored."""
    callee_id = payload["calleeId"]
    rows = yield from env.raw_scan(env.t_invoke, C.eq("CalleeId", callee_id),
                                   ["Id", "Step"])
    if not rows:
        env.sim.record("callback", env.iid,
                       {"calleeId": callee_id, "ignored": True})
        return
    entry = rows[0]
    yield from env.raw_write(env.t_invoke, entry["Id"], entry["Step"],
                             [U.set("Result", _wrap(payload.get("args")))])
    env.sim.record("callback", env.iid,
                   {"calleeId": callee_id, "ignored": False})


def _callback_loop(env, caller, callee_id, result, kind=SYNC_CALLBACK):
    for _ in range(CALLBACK_RETRIES):
        cb_iid = env.sim.next_id("cb.%s" % caller)
        _, tid = yield from env.spawn_exec(
            caller, {"kind": kind, "calleeId": callee_id, "args": result},
            iid=cb_iid)
        res = yield from env.join(tid)
        if res[0] == "ok":
            return
    raise CalleeUnavailable("callback to %r kept failing" % caller)


# -- caller-side invocation -----------------------------------------------------

def sync_invoke(env, callee, args, ctx_override=None, cascade=False):
    """Invoke ``callee`` and wait for its result, exactly once per step.

    The callee id is minted under an invoke-log guard and reused by
    every replay; a logged result short-circuits re-invocation. A lost
    direct return falls back to the invoke log (the callback may have
    landed even though the callee died) and then to re-invoking with
    the same id, which the callee's own logs make safe.
    """
    if not cascade:
        env.runtime.check_edge(env.ssf, callee)
    iid, step = env.next_logkey()
    minted = env.sim.next_id(callee)
    ctx = ctx_override if ctx_override is not None else env.txn
    sets = [U.set("CalleeId", minted), U.set("CalleeName", callee)]
    if ctx is not None:
        sets += [U.set("TxnId", ctx.txn_id), U.set("TxnMode", ctx.mode)]
    ok = yield from env.raw_cond_write(env.t_invoke, iid, step,
                                       C.not_exists("Id"), sets)
    if ok:
        callee_id = minted
        logged_result = None
    else:
        row = yield from env.raw_read(env.t_invoke, iid, step)
        callee_id = row["CalleeId"]
        logged_result = row.get("Result")
    if logged_result is not None:
        result = _unwrap(logged_result)
    else:
        payload = {"kind": CALL, "calleeId": callee_id, "args": args,
                   "caller": env.ssf}
        if ctx is not None:
            payload["ctx"] = ctx.to_wire()
        result = yield from _invoke_until_result(env, callee, payload,
                                                 iid, step, callee_id)
    if _txn.is_abort_marker(result) and env.txn is not None:
        raise _txn.TxnAbortSignal(env.txn.txn_id)
    return result


def _invoke_until_result(env, callee, payload, iid, step, callee_id):
    for _ in range(INVOKE_RETRIES):
        _, tid = yield from env.spawn_exec(callee, payload, iid=callee_id)
        res = yield from env.join(tid)
        if res[0] == "ok":
            return res[1]
        row = yield from env.raw_read(env.t_invoke, iid, step)
        if row is not None and row.get("Result") is not None:
            return _unwrap(row["Result"])
    raise CalleeUnavailable(callee)


def async_invoke(env, callee, args):
    """Fire-and-forget invocation with the registration handshake: the
    callee's intent is logged (and acknowledged via callback) before the
    actual asynchronous launch, so a caller crash between the two still
    leaves the callee's collector responsible for running it."""
    if env.txn is not None and env.txn.mode == _txn.EXECUTE:
        raise _txn.TxnError("asyncInvoke is not supported inside transactions")
    env.runtime.check_edge(env.ssf, callee)
    iid, step = env.next_logkey()
    minted = env.sim.next_id(callee)
    ok = yield from env.raw_cond_write(
        env.t_invoke, iid, step, C.not_exists("Id"),
        [U.set("CalleeId", minted), U.set("CalleeName", callee)])
    if ok:
        callee_id = minted
        registered = None
    else:
        row = yield from env.raw_read(env.t_invoke, iid, step)
        callee_id = row["CalleeId"]
        registered = row.get("Result")
    if registered is None:
        reg_payload = {"kind": ASYNC_REG, "calleeId": callee_id, "args": args,
                       "caller": env.ssf}
        for _ in range(INVOKE_RETRIES):
            reg_iid = env.sim.next_id("reg.%s" % callee)
            _, tid = yield from env.spawn_exec(callee, reg_payload, iid=reg_iid)
            res = yield from env.join(tid)
            if res[0] == "ok":
                break
            row = yield from env.raw_read(env.t_invoke, iid, step)
            if row is not None and row.get("Result") is not None:
                break
        else:
            raise CalleeUnavailable(callee)
    fire_payload = {"kind": CALL, "async": True, "calleeId": callee_id,
                    "args": args}
    yield from env.spawn_exec(callee, fire_payload, iid=callee_id)


def legacy_invoke(env, callee, args):
    """Passthrough call to a handler outside the runtime. No logging, no
    callback: at-least-once semantics only, and any side effects it has
    will repeat on re-execution. Prefer wrapping such code in an SSF."""
    env.runtime.check_edge(env.ssf, callee)
    result = yield from _run_handler(env, env.runtime.handler(callee), args)
    return result
