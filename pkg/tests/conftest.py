"""Shared fixtures: lightweight drivers for wrapper generators and a
single-SSF workflow builder."""

import itertools

import pytest

from ssfsim.harness.workflow import REGISTRY, WorkflowDef
from ssfsim.runtime import Env, Runtime, SsfDef
from ssfsim.store import Store, TableSchema

_ids = itertools.count()


def register_handler(fn):
    hid = "test.h%d" % next(_ids)
    REGISTRY[hid] = fn
    return hid


def single_ssf_workflow(handler, tables, name="app", extra_ssfs=(), edges=()):
    ssfs = [{"name": name, "handler": register_handler(handler), "tables": tables}]
    for extra_name, extra_fn, extra_tables in extra_ssfs:
        ssfs.append({"name": extra_name, "handler": register_handler(extra_fn),
                     "tables": extra_tables})
    return WorkflowDef.from_dict({
        "name": "test-%s" % name, "entry": name, "ssfs": ssfs,
        "edges": [list(e) for e in edges],
    }).validate()


class DummySim:
    """Stands in for the scheduler in sequential wrapper tests."""

    def __init__(self):
        self.now = 0
        self.events = []

    def record(self, kind, iid, detail=None):
        self.events.append((self.now, len(self.events), kind, iid, detail))

    def next_id(self, prefix):
        self.now += 0  # ids unused in these tests
        return "%s-fixed" % prefix


def mini_runtime(tables=None, n=16):
    tables = tables if tables is not None else {"data": {"n": n}}
    ssfs = {"app": SsfDef("app", None, tables, frozenset())}
    return Runtime(ssfs, default_n=n)


def mini_store(runtime, seed=0):
    store = Store(seed=seed)
    runtime.create_tables(store)
    return store


def drive(store, gen):
    """Run a wrapper generator to completion against a store, executing
    each syscall immediately (fully sequential semantics)."""
    t = [0]
    return _drive(store, gen, t)


def _drive(store, gen, t):
    mode, value = "send", None
    while True:
        try:
            sc = gen.send(value) if mode == "send" else gen.throw(value)
        except StopIteration as stop:
            return stop.value
        mode = "send"
        op = sc[0]
        if op == "store":
            t[0] += 1
            try:
                value = sc[3](store)
            except Exception as exc:
                mode, value = "throw", exc
        elif op == "now":
            t[0] += 1
            value = t[0]
        elif op in ("yield", "sleep"):
            t[0] += 1
            value = None
        else:
            raise AssertionError("syscall %r not supported by drive()" % (op,))


@pytest.fixture
def daal_env():
    """(store, make_env) with one SSF owning a 'data' table, N=16."""
    runtime = mini_runtime()
    store = mini_store(runtime)

    def make_env(iid):
        return Env(DummySim(), runtime, "app", iid)

    return store, make_env
