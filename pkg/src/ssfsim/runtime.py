"""Execution context and per-SSF runtime wiring.

Each SSF owns its data tables plus four system tables (intent, read
log, invoke log, shadow) and a collector-bookkeeping table; sovereignty
is enforced here, at the point an operation is about to touch the
store. Handlers are generator functions ``handler(env, args)`` that
perform every external operation through the env so that each one is a
scheduler yield point.
"""

from __future__ import annotations

from .sim import SovereigntyViolation
from .store import C, U

STEP_BLOCK = 1 << 20  # step-number range per spawned task inside one execution

INTENT_SORT = "i"


class WorkflowViolation(Exception):
    """An SSF invoked a target that is not on its outgoing edges."""


def system_tables(ssf: str) -> dict:
    return {
        "intent": "%s::intent" % ssf,
        "read": "%s::readlog" % ssf,
        "invoke": "%s::invokelog" % ssf,
        "shadow": "%s::shadow" % ssf,
        "cursors": "%s::cursors" % ssf,
    }


class SsfDef:
    __slots__ = ("name", "handler", "tables", "out_edges")

    def __init__(self, name, handler, tables, out_edges):
        self.name = name
        self.handler = handler
        self.tables = tables      # table name -> {"n": int, "capacity": int}
        self.out_edges = out_edges


class Runtime:
    """Static description of a deployed workflow: SSF handlers, table
    ownership, DAAL capacities, and step-function routing metadata."""

    def __init__(self, ssfs, mode="driver", entry=None, txn_markers=None,
                 txn_nodes=None, baseline=False, default_n=16):
        self.ssfs: dict[str, SsfDef] = ssfs
        self.mode = mode
        self.entry = entry
        self.txn_markers = txn_markers
        self.txn_nodes = txn_nodes or set()
        self.baseline = baseline
        self.default_n = default_n
        self._n: dict[str, int] = {}
        self._owned: dict[str, frozenset] = {}
        self._sys: dict[str, dict] = {}
        for name, d in ssfs.items():
            sys_t = system_tables(name)
            self._sys[name] = sys_t
            self._owned[name] = frozenset(d.tables) | frozenset(sys_t.values())
            for tname, cfg in d.tables.items():
                n = cfg.get("n", default_n)
                cap = cfg.get("capacity", 4096)
                # rough headroom check: n log entries plus metadata must fit
                if n * 64 + 512 > cap:
                    raise ValueError(
                        "table %r: n=%d does not fit capacity %d" % (tname, n, cap))
                self._n[tname] = n

    def n_for(self, table) -> int:
        return self._n.get(table, self.default_n)

    def owned(self, ssf) -> frozenset:
        return self._owned[ssf]

    def sys(self, ssf) -> dict:
        return self._sys[ssf]

    def handler(self, ssf):
        return self.ssfs[ssf].handler

    def check_edge(self, caller, callee):
        if callee not in self.ssfs:
            raise WorkflowViolation("unknown SSF %r" % callee)
        if caller is not None and callee not in self.ssfs[caller].out_edges:
            raise WorkflowViolation("%r is not an outgoing edge of %r" % (callee, caller))

    def step_successors(self, ssf):
        return sorted(self.ssfs[ssf].out_edges)

    def create_tables(self, store):
        from .store import TableSchema
        for name, d in self.ssfs.items():
            for tname, cfg in d.tables.items():
                store.create_table(TableSchema(
                    tname, "Key", "RowId", cfg.get("capacity", 4096)))
            sys_t = self._sys[name]
            store.create_table(TableSchema(sys_t["intent"], "Id", "Kind", 65536))
            store.create_table(TableSchema(sys_t["read"], "Id", "Step", 65536))
            store.create_table(TableSchema(sys_t["invoke"], "Id", "Step", 65536))
            store.create_table(TableSchema(sys_t["shadow"], "TxnId", "Skey", 65536))
            store.create_table(TableSchema(sys_t["cursors"], "Collector", "Table", 65536))


class Env:
    """Per-execution context carried through every wrapped operation.

    Holds the instance identity, the mutable step counter that names
    external operations, and the transaction state. Not shareable
    between concurrent logical tasks; ``fork`` hands a child task its
    own disjoint step-number block.
    """

    def __init__(self, sim, runtime, ssf, iid, step_base=0, _alloc=None):
        self.sim = sim
        self.runtime = runtime
        self.ssf = ssf
        self.iid = iid
        self._step = step_base
        self._step_end = step_base + STEP_BLOCK
        self._alloc = _alloc if _alloc is not None else [1]
        self.txn = None
        self.txn_owner = False
        self.txn_attempts = 0
        self.intent_create_time = 0
        self._owned = runtime.owned(ssf)
        self._sys = runtime.sys(ssf)

    # -- identity ----------------------------------------------------------

    def next_logkey(self):
        step = self._step
        if step + 1 >= self._step_end:
            raise RuntimeError("step block exhausted for %s" % self.iid)
        self._step = step + 1
        return (self.iid, step)

    def fork(self):
        """Child env for a parallel task: same identity and transaction,
        disjoint step-number block (allocated in spawn order, so replays
        assign identical log keys)."""
        block = self._alloc[0]
        self._alloc[0] += 1
        child = Env(self.sim, self.runtime, self.ssf, self.iid,
                    step_base=block * STEP_BLOCK, _alloc=self._alloc)
        child.txn = self.txn
        child.txn_attempts = self.txn_attempts
        child.intent_create_time = self.intent_create_time
        return child

    @property
    def t_intent(self):
        return self._sys["intent"]

    @property
    def t_read(self):
        return self._sys["read"]

    @property
    def t_invoke(self):
        return self._sys["invoke"]

    @property
    def t_shadow(self):
        return self._sys["shadow"]

    # -- raw store access (sovereignty-checked yield points) ----------------

    def _own(self, table):
        if table not in self._owned:
            raise SovereigntyViolation(
                "SSF %r accessed table %r it does not own" % (self.ssf, table))

    def raw_read(self, table, hk, sk):
        self._own(table)
        row = yield ("store", "read", table, lambda st: st.raw_read(table, hk, sk))
        return row

    def raw_cond_write(self, table, hk, sk, cond, update):
        self._own(table)
        ok = yield ("store", "condWrite", table,
                    lambda st: st.raw_cond_write(table, hk, sk, cond, update))
        return ok

    def raw_write(self, table, hk, sk, update):
        self._own(table)
        yield ("store", "write", table,
               lambda st: st.raw_write(table, hk, sk, update))

    def raw_scan(self, table, filt, projection=None):
        self._own(table)
        rows = yield ("store", "scan", table,
                      lambda st: st.raw_scan(table, filt, projection))
        return rows

    def raw_remove(self, table, filt):
        self._own(table)
        n = yield ("store", "remove", table, lambda st: st.raw_remove(table, filt))
        return n

    def paged_scan(self, table, filt, projection, cursor, limit):
        self._own(table)
        page = yield ("store", "pagedScan", table,
                      lambda st: st.paged_scan(table, filt, projection, cursor, limit))
        return page

    # -- scheduler services --------------------------------------------------

    def now(self):
        t = yield ("now",)
        return t

    def pause(self):
        yield ("yield",)

    def sleep(self, ticks):
        yield ("sleep", ticks)

    def spawn_exec(self, ssf, payload, iid=None, relaunch=False):
        handle = yield ("spawn_exec", ssf, payload, iid, relaunch)
        return handle

    def join(self, tid):
        res = yield ("join", tid)
        return res

    def spawn_sub(self, fn):
        """Spawn ``fn(child_env)`` as a parallel task of this execution.
        A transaction-abort signal raised inside the child is returned
        to the joiner as a value; other exceptions fail the execution."""
        from .txn import TxnAbortSignal, abort_marker
        child = self.fork()

        def _wrapper():
            try:
                result = yield from fn(child)
            except TxnAbortSignal as sig:
                return abort_marker(sig.txn_id)
            return result

        tid = yield ("spawn_task", _wrapper())
        return tid

    # -- wrapped API (delegates; lets apps depend on env alone) -------------

    def read(self, table, key):
        from . import daal
        val = yield from daal.read(self, table, key)
        return val

    def write(self, table, key, value):
        from . import daal
        yield from daal.write(self, table, key, value)

    def cond_write(self, table, key, value, cond):
        from . import daal
        ok = yield from daal.cond_write(self, table, key, value, cond)
        return ok

    def sync_invoke(self, callee, args):
        from . import invoke
        res = yield from invoke.sync_invoke(self, callee, args)
        return res

    def async_invoke(self, callee, args):
        from . import invoke
        yield from invoke.async_invoke(self, callee, args)

    def legacy_invoke(self, callee, args):
        """Call a function outside the exactly-once runtime. At-least-once
        only: replays re-run it and nothing is logged."""
        from . import invoke
        res = yield from invoke.legacy_invoke(self, callee, args)
        return res


class BaselineEnv(Env):
    """Negative-control environment: same surface, no logging, no intent.

    Reads and writes go straight at the head row, invocations carry no
    idempotence guard, and the platform retries crashed instances from
    scratch with a fresh id. Exists so checkers can demonstrate the
    failure modes the wrappers prevent.
    """

    def read(self, table, key):
        row = yield from self.raw_read(table, key, "HEAD")
        return row.get("Value") if row else None

    def write(self, table, key, value):
        yield from self.raw_write(table, key, "HEAD", [U.set("Value", value)])

    def cond_write(self, table, key, value, cond):
        ok = yield from self.raw_cond_write(table, key, "HEAD", cond,
                                            [U.set("Value", value)])
        return ok

    def sync_invoke(self, callee, args):
        self.runtime.check_edge(self.ssf, callee)
        for _ in range(8):
            iid = self.sim.next_id(callee)
            _, tid = yield from self.spawn_exec(callee, {"kind": "CALL", "args": args},
                                                iid=iid)
            res = yield from self.join(tid)
            if res[0] == "ok":
                return res[1]
        raise RuntimeError("baseline callee %r kept failing" % callee)

    def async_invoke(self, callee, args):
        self.runtime.check_edge(self.ssf, callee)
        yield from self.spawn_exec(callee, {"kind": "CALL", "args": args},
                                   iid=self.sim.next_id(callee))
