"""Workflow definition format, validation, and the handler registry.

A workflow is a directed graph of SSFs (cycles allowed in driver mode),
each owning a disjoint set of tables, with handlers referenced by
registered id. Step-function workflows add optional begin/end
transaction markers and must be acyclic, since the platform routes each
node's output to its successors and joins fan-ins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..runtime import Runtime, SsfDef

REGISTRY: dict = {}


def register(handler_id):
    def deco(fn):
        REGISTRY[handler_id] = fn
        return fn

    return deco


class WorkflowError(Exception):
    pass


@dataclass
class WorkflowDef:
    name: str
    entry: str
    ssfs: dict                      # name -> {"handler": id, "tables": {t: cfg}}
    edges: list = field(default_factory=list)
    mode: str = "driver"
    txn_markers: dict | None = None

    @classmethod
    def from_dict(cls, d):
        ssfs = {}
        for s in d.get("ssfs", []):
            tables = s.get("tables", {})
            if isinstance(tables, list):
                tables = {t: {} for t in tables}
            ssfs[s["name"]] = {"handler": s["handler"], "tables": tables}
        return cls(
            name=d.get("name", "workflow"),
            entry=d["entry"],
            ssfs=ssfs,
            edges=[tuple(e) for e in d.get("edges", [])],
            mode=d.get("mode", "driver"),
            txn_markers=d.get("txn_markers"),
        )

    def validate(self, registry=None):
        registry = registry if registry is not None else REGISTRY
        problems = []
        if self.entry not in self.ssfs:
            problems.append("entry %r is not a declared SSF" % self.entry)
        owners: dict = {}
        for name, spec in self.ssfs.items():
            if spec["handler"] not in registry:
                problems.append("SSF %r: unknown handler %r" % (name, spec["handler"]))
            for t in spec["tables"]:
                if t in owners:
                    problems.append(
                        "table %r claimed by both %r and %r" % (t, owners[t], name))
                owners[t] = name
        for a, b in self.edges:
            if a not in self.ssfs:
                problems.append("edge source %r is not a declared SSF" % a)
            if b not in self.ssfs:
                problems.append("edge target %r is not a declared SSF" % b)
        if self.mode == "step":
            if self._has_cycle():
                problems.append("step workflows must be acyclic")
            if self.txn_markers:
                for k in ("begin", "end"):
                    node = self.txn_markers.get(k)
                    if node not in self.ssfs:
                        problems.append("txn marker %r (%r) not a declared SSF" % (k, node))
        elif self.mode != "driver":
            problems.append("unknown mode %r" % self.mode)
        if problems:
            raise WorkflowError("; ".join(problems))
        return self

    def _has_cycle(self):
        succ: dict = {n: [] for n in self.ssfs}
        for a, b in self.edges:
            if a in succ:
                succ[a].append(b)
        state: dict = {}

        def visit(n):
            if state.get(n) == 1:
                return True
            if state.get(n) == 2:
                return False
            state[n] = 1
            if any(visit(m) for m in succ.get(n, [])):
                return True
            state[n] = 2
            return False

        return any(visit(n) for n in self.ssfs)

    def predecessors(self, node):
        return sorted(a for a, b in self.edges if b == node)

    def successors(self, node):
        return sorted(b for a, b in self.edges if a == node)

    def txn_subgraph_nodes(self):
        """Nodes strictly inside (and including) the begin/end markers."""
        if not self.txn_markers:
            return set()
        begin, end = self.txn_markers["begin"], self.txn_markers["end"]
        succ: dict = {n: set() for n in self.ssfs}
        for a, b in self.edges:
            succ[a].add(b)
        nodes = set()
        frontier = [begin]
        while frontier:
            n = frontier.pop()
            if n in nodes:
                continue
            nodes.add(n)
            if n == end:
                continue
            frontier.extend(succ.get(n, ()))
        return nodes


def load_workflow(path) -> WorkflowDef:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise WorkflowError("%s: invalid JSON at line %d" % (path, exc.lineno))
    return WorkflowDef.from_dict(data).validate()


def build_runtime(wf: WorkflowDef, baseline=False, registry=None) -> Runtime:
    registry = registry if registry is not None else REGISTRY
    out_edges: dict = {n: set() for n in wf.ssfs}
    for a, b in wf.edges:
        out_edges[a].add(b)
    ssfs = {}
    for name, spec in wf.ssfs.items():
        ssfs[name] = SsfDef(name, registry[spec["handler"]],
                            dict(spec["tables"]), frozenset(out_edges[name]))
    return Runtime(ssfs, mode=wf.mode, entry=wf.entry,
                   txn_markers=wf.txn_markers,
                   txn_nodes=wf.txn_subgraph_nodes(),
                   baseline=baseline)
