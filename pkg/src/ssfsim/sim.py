"""Deterministic cooperative scheduler modeling the serverless platform.

Logical tasks are Python generators that yield syscall tuples; the
scheduler executes one syscall per step, advancing the logical clock by
one tick. Store operations, invocations, joins and explicit yields are
the only yield points, and crashes are injected only there, so a fault
schedule is fully determined by (seed, fault plan, workload).

An *execution* is one launch of an SSF instance: the original launch
and every intent-collector relaunch share an instance id but are
separate executions, each with its own lifetime deadline of T ticks.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from fnmatch import fnmatch


class SimError(Exception):
    pass


class SovereigntyViolation(SimError):
    """An SSF touched a table it does not own; the simulation is aborted."""


class LivenessFailure(SimError):
    pass


@dataclass
class FaultPlan:
    """Seeded schedule of crash points.

    ``crashes`` lists explicit (instance-id glob, yield-index) points,
    each firing at most once. ``crash_rate`` injects a crash with that
    probability at every yield point, limited to
    ``max_crashes_per_instance`` per instance id so that every instance
    eventually gets a fault-free run (without a bound, re-executions
    whose replay grows with the log would never finish).
    """

    seed: int = 0
    crash_rate: float = 0.0
    crashes: list = field(default_factory=list)
    max_crashes_per_instance: int = 3
    max_logical_time: int = 500_000

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        crashes = [tuple(c) for c in d.pop("crashes", [])]
        return cls(crashes=crashes, **d)


@dataclass
class GcConfig:
    """Collector timing. T is both the enforced per-execution lifetime
    and the garbage collector's safety window."""

    T: int = 200
    gc_period: int = 60
    ic_period: int = 60
    ic_backoff: int = 90
    page_limit: int = 200

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d or {}))


class _Task:
    __slots__ = ("tid", "gen", "ex", "joiners", "blocked_on", "finished", "result", "resume")

    def __init__(self, tid, gen, ex):
        self.tid = tid
        self.gen = gen
        self.ex = ex
        self.joiners = []
        self.blocked_on = None
        self.finished = False
        self.result = None
        self.resume = ("send", None)


class _Execution:
    __slots__ = ("iid", "ssf", "spawn_time", "deadline", "yields", "tasks",
                 "main_tid", "collector", "alive", "live", "payload")

    def __init__(self, iid, ssf, spawn_time, deadline, collector, payload):
        self.iid = iid
        self.ssf = ssf
        self.spawn_time = spawn_time
        self.deadline = deadline
        self.yields = 0
        self.tasks = {}
        self.main_tid = None
        self.collector = collector
        self.alive = True
        self.live = 0
        self.payload = payload


class Scheduler:
    """Event loop hosting logical tasks over one Store.

    ``runner(sim, ssf_name, payload, iid)`` must return the generator
    that performs one execution of the named SSF; the harness wires in
    the runtime's instance stub.
    """

    def __init__(self, store, runner, fault_plan=None, gc_config=None,
                 trace_level="app"):
        self.store = store
        self.runner = runner
        self.plan = fault_plan or FaultPlan()
        self.cfg = gc_config or GcConfig()
        self.trace_level = trace_level
        self.now = 0
        self.events: list = []
        self._seq = 0
        self._rng_sched = random.Random(self.plan.seed)
        self._rng_crash = random.Random(self.plan.seed ^ 0x9E3779B9)
        self._rng_ids = random.Random((self.plan.seed * 31 + 7) & 0xFFFFFFFF)
        self._next_tid = 0
        self._tasks: dict[int, _Task] = {}
        self._live_tasks = 0
        self._runnable: list[_Task] = []
        self._executions: dict = {}          # (iid, launch#) handled via list
        self._launch_count: dict[str, int] = {}
        self._crash_spent: dict[str, int] = {}
        self._explicit = [list(c) + [False] for c in self.plan.crashes]
        self._deadlines: list = []           # heap of (deadline, serial, execution)
        self._sleepers: list = []            # heap of (wake time, serial, task)
        self._dserial = 0
        self._timers: list = []              # dicts: period, factory, name, next
        self._requests: list = []            # (at, ssf, payload, iid)
        self._root_done: dict[str, bool] = {}
        self._roots_completed = 0
        self._roots_launched = 0
        self.sequential = False              # launch request i+1 only after i is done
        self._last_app_activity = 0
        self.completion_listeners = []       # f(iid, ssf, result)
        self.failure_listeners = []          # f(execution, reason)
        self.quiesced = False

    # -- identity and time ----------------------------------------------

    def next_id(self, prefix) -> str:
        return "%s-%08x" % (prefix, self._rng_ids.getrandbits(32))

    def record(self, kind, iid, detail=None):
        if self.trace_level == "off":
            return
        if kind == "storeOp" and self.trace_level != "full":
            return
        self.events.append((self.now, self._seq, kind, iid, detail))
        self._seq += 1

    def trace_jsonl(self) -> str:
        lines = []
        for time_, seq, kind, iid, detail in self.events:
            lines.append(json.dumps(
                {"time": time_, "seq": seq, "kind": kind,
                 "instanceId": iid, "detail": detail},
                sort_keys=True, separators=(",", ":")))
        return "".join(lines) + ("\n" if lines else "")

    # -- workload setup ---------------------------------------------------

    def add_request(self, ssf, payload, at=0, iid=None):
        iid = iid or self.next_id(ssf)
        self._requests.append((at, len(self._requests), ssf, payload, iid))
        self._root_done[iid] = False
        return iid

    def register_timer(self, period, factory, name):
        if period < 1:
            raise SimError("timer period must be >= 1")
        self._timers.append({"period": period, "factory": factory,
                             "name": name, "next": period, "fired": 0})

    # -- spawning ----------------------------------------------------------

    def spawn_execution(self, ssf, payload, iid=None, collector=False,
                        relaunch=False):
        iid = iid or self.next_id(ssf)
        launch = self._launch_count.get(iid, 0)
        self._launch_count[iid] = launch + 1
        ex = _Execution(iid, ssf, self.now, self.now + self.cfg.T, collector, payload)
        gen = self.runner(self, ssf, payload, iid)
        task = self._new_task(gen, ex)
        ex.main_tid = task.tid
        self._dserial += 1
        heapq.heappush(self._deadlines, (ex.deadline, self._dserial, ex))
        self.record("spawn", iid, {"ssf": ssf, "launch": launch,
                                   "relaunch": relaunch})
        return iid, task.tid

    def spawn_subtask(self, ex, gen):
        return self._new_task(gen, ex).tid

    def _new_task(self, gen, ex):
        self._next_tid += 1
        task = _Task(self._next_tid, gen, ex)
        self._tasks[task.tid] = task
        ex.tasks[task.tid] = task
        ex.live += 1
        self._live_tasks += 1
        self._runnable.append(task)
        return task

    # -- main loop --------------------------------------------------------

    def run(self, idle_time=0):
        """Run to quiescence (plus ``idle_time`` idle ticks for the timers)
        or to the fault plan's max logical time. Returns True if the
        workload quiesced."""
        req_queue = sorted(self._requests)
        req_i = 0
        while True:
            if self.now > self.plan.max_logical_time:
                self.quiesced = False
                return False
            # launch due requests
            while req_i < len(req_queue) and req_queue[req_i][0] <= self.now:
                if self.sequential and self._roots_completed < self._roots_launched:
                    break
                _, _, ssf, payload, iid = req_queue[req_i]
                self._roots_launched += 1
                self.spawn_execution(ssf, payload, iid=iid)
                req_i += 1
            # enforce lifetime deadlines, including on blocked tasks
            while self._deadlines and self._deadlines[0][0] < self.now:
                _, _, ex = heapq.heappop(self._deadlines)
                if ex.alive and ex.live > 0:
                    self._kill(ex, "timeout")
            # wake sleepers
            while self._sleepers and self._sleepers[0][0] <= self.now:
                _, _, task = heapq.heappop(self._sleepers)
                if not task.finished and task.ex.alive:
                    task.resume = ("send", None)
                    self._runnable.append(task)
            # fire due timers
            for t in self._timers:
                while t["next"] <= self.now:
                    iid = "%s-t%d" % (t["name"], t["fired"])
                    t["fired"] += 1
                    self.record("timerFire", iid, {"timer": t["name"], "at": t["next"]})
                    ex = _Execution(iid, t["name"], self.now,
                                    self.now + self.cfg.T, True, None)
                    task = self._new_task(t["factory"](), ex)
                    ex.main_tid = task.tid
                    self._dserial += 1
                    heapq.heappush(self._deadlines, (ex.deadline, self._dserial, ex))
                    t["next"] += t["period"]
            if not self._runnable:
                if self._idle_done(req_i, req_queue, idle_time):
                    self.quiesced = all(self._root_done.values())
                    return self.quiesced
                nxt = self._next_wakeup(req_i, req_queue)
                if nxt is None or nxt <= self.now:
                    # blocked tasks with no timers cannot make progress;
                    # jump to the earliest deadline so timeouts fire
                    if self._deadlines:
                        self.now = max(self.now + 1, self._deadlines[0][0] + 1)
                        continue
                    self.quiesced = all(self._root_done.values())
                    return self.quiesced
                self.now = nxt
                continue
            task = self._runnable.pop(self._rng_sched.randrange(len(self._runnable)))
            ex = task.ex
            if not ex.alive:
                continue
            if not ex.collector:
                self._last_app_activity = self.now
            if self._should_crash(ex):
                self.record("crash", ex.iid, {"yield": ex.yields})
                self._kill(ex, "crash")
                self.now += 1
                continue
            self._step(task)
            self.now += 1

    def _idle_done(self, req_i, req_queue, idle_time):
        if req_i < len(req_queue):
            return False
        if self._live_tasks:
            return False
        if not all(self._root_done.values()):
            return False
        return self.now - self._last_app_activity >= idle_time

    def _next_wakeup(self, req_i, req_queue):
        times = []
        if req_i < len(req_queue):
            times.append(req_queue[req_i][0])
        for t in self._timers:
            times.append(t["next"])
        if self._sleepers:
            times.append(self._sleepers[0][0])
        if self._live_tasks and self._deadlines:
            times.append(self._deadlines[0][0] + 1)
        return min(times) if times else None

    def _should_crash(self, ex):
        for spec in self._explicit:
            if not spec[2] and fnmatch(ex.iid, spec[0]) and ex.yields == spec[1]:
                spec[2] = True
                return True
        if self.plan.crash_rate > 0.0:
            if self._rng_crash.random() < self.plan.crash_rate:
                # crashes are finite per instance id; collector runs share
                # their timer's budget so recovery machinery cannot be
                # starved forever by an adversarial coin
                key = ex.ssf if ex.collector else ex.iid
                spent = self._crash_spent.get(key, 0)
                if spent < self.plan.max_crashes_per_instance:
                    self._crash_spent[key] = spent + 1
                    return True
        return False

    def _step(self, task):
        ex = task.ex
        mode, value = task.resume
        try:
            if mode == "send":
                sc = task.gen.send(value)
            else:
                sc = task.gen.throw(value)
        except StopIteration as stop:
            self._finish(task, ("ok", stop.value))
            return
        except SovereigntyViolation:
            raise
        except Exception as exc:  # handler bug or surfaced protocol error
            self.record("crash", ex.iid, {"yield": ex.yields, "reason": "exception",
                                          "error": repr(exc)})
            self._kill(ex, "exception")
            return
        ex.yields += 1
        op = sc[0]
        if op == "store":
            _, name, table, fn = sc
            try:
                res = fn(self.store)
            except Exception as exc:
                task.resume = ("throw", exc)
                self._runnable.append(task)
                return
            if self.trace_level == "full":
                self.record("storeOp", ex.iid, {"op": name, "table": table})
            task.resume = ("send", res)
            self._runnable.append(task)
        elif op == "now":
            task.resume = ("send", self.now)
            self._runnable.append(task)
        elif op == "yield":
            task.resume = ("send", None)
            self._runnable.append(task)
        elif op == "sleep":
            self._dserial += 1
            heapq.heappush(self._sleepers, (self.now + sc[1], self._dserial, task))
        elif op == "spawn_exec":
            _, ssf, payload, iid, relaunch = sc
            handle = self.spawn_execution(ssf, payload, iid=iid, relaunch=relaunch)
            task.resume = ("send", handle)
            self._runnable.append(task)
        elif op == "spawn_task":
            tid = self.spawn_subtask(ex, sc[1])
            task.resume = ("send", tid)
            self._runnable.append(task)
        elif op == "join":
            target = self._tasks.get(sc[1])
            if target is None or target.finished:
                task.resume = ("send", target.result if target else ("failed", "gone"))
                self._runnable.append(task)
            else:
                task.blocked_on = sc[1]
                target.joiners.append(task)
        else:
            raise SimError("unknown syscall %r" % (op,))

    def _finish(self, task, result):
        task.finished = True
        task.result = result
        task.ex.live -= 1
        self._live_tasks -= 1
        for joiner in task.joiners:
            joiner.blocked_on = None
            joiner.resume = ("send", result)
            self._runnable.append(joiner)
        task.joiners = []
        ex = task.ex
        if task.tid == ex.main_tid and result[0] == "ok":
            self.record("complete", ex.iid, None)
            if ex.iid in self._root_done and not self._root_done[ex.iid]:
                self._root_done[ex.iid] = True
                self._roots_completed += 1
            for listener in self.completion_listeners:
                listener(ex.iid, ex.ssf, result[1])

    def _kill(self, ex, reason):
        ex.alive = False
        if reason == "timeout":
            self.record("timeout", ex.iid, None)
        for task in list(ex.tasks.values()):
            if task.finished:
                continue
            task.finished = True
            task.result = ("failed", reason)
            ex.live -= 1
            self._live_tasks -= 1
            task.gen.close()
            if task in self._runnable:
                self._runnable.remove(task)
            for joiner in task.joiners:
                if joiner.ex.alive and not joiner.finished:
                    joiner.blocked_on = None
                    joiner.resume = ("send", ("failed", reason))
                    self._runnable.append(joiner)
            task.joiners = []
        for listener in self.failure_listeners:
            listener(ex, reason)


# -- exhaustive interleaving enumeration ------------------------------------

def enumerate_schedules(setup, visit, max_runs=None):
    """DFS over every interleaving of a small fixed task set.

    ``setup()`` must return (store, [generator, ...]); the generators may
    yield only store/now/yield syscalls. For each complete schedule,
    ``visit(store, results)`` is called with the per-task return values.
    Schedules are re-executed from scratch along each branch, which is
    exact (no state cloning) but only tractable for small instances.
    Returns the number of complete schedules explored.
    """

    def advance(task, store, mode, value):
        """Run a task's local segment up to its next yield point (or its
        return); steps of the schedule are exactly the yield points, so
        trailing local computation folds into the preceding step."""
        try:
            sc = task["gen"].send(value) if mode == "send" else task["gen"].throw(value)
        except StopIteration as stop:
            task["done"] = True
            task["ret"] = stop.value
            return
        task["sc"] = sc

    def execute(task, store):
        sc = task.pop("sc")
        op = sc[0]
        if op == "store":
            try:
                res = sc[3](store)
            except Exception as exc:
                advance(task, store, "throw", exc)
                return
            advance(task, store, "send", res)
        elif op == "now":
            advance(task, store, "send", 0)
        elif op == "yield":
            advance(task, store, "send", None)
        else:
            raise SimError("syscall %r not supported in enumeration" % (op,))

    pending = [()]
    runs = 0
    while pending:
        prefix = pending.pop()
        if max_runs is not None and runs >= max_runs:
            raise SimError("schedule enumeration exceeded %d runs" % max_runs)
        store, gens = setup()
        tasks = [{"gen": g, "done": False, "ret": None, "sc": None} for g in gens]
        for t in tasks:
            advance(t, store, "send", None)
        choices = []
        branch_width = []
        while True:
            runnable = [i for i, t in enumerate(tasks) if not t["done"]]
            if not runnable:
                break
            depth = len(choices)
            pick = prefix[depth] if depth < len(prefix) else 0
            choices.append(pick)
            branch_width.append(len(runnable))
            execute(tasks[runnable[pick]], store)
        visit(store, [t["ret"] for t in tasks])
        runs += 1
        for depth in range(len(choices) - 1, len(prefix) - 1, -1):
            for alt in range(choices[depth] + 1, branch_width[depth]):
                pending.append(tuple(choices[:depth]) + (alt,))
    return runs


def sample_schedules(setup, visit, seeds):
    """Randomized companion to ``enumerate_schedules`` for instances whose
    full schedule tree is intractable: one run per seed, choices drawn
    from that seed's generator."""
    for seed in seeds:
        rng = random.Random(seed)
        store, gens = setup()
        tasks = [{"gen": g, "done": False, "ret": None, "sc": None} for g in gens]

        def advance(task, mode, value):
            try:
                sc = task["gen"].send(value) if mode == "send" else task["gen"].throw(value)
            except StopIteration as stop:
                task["done"] = True
                task["ret"] = stop.value
                return
            task["sc"] = sc

        for t in tasks:
            advance(t, "send", None)
        while True:
            runnable = [t for t in tasks if not t["done"]]
            if not runnable:
                break
            task = runnable[rng.randrange(len(runnable))]
            sc = task.pop("sc")
            op = sc[0]
            if op == "store":
                try:
                    res = sc[3](store)
                except Exception as exc:
                    advance(task, "throw", exc)
                    continue
                advance(task, "send", res)
            elif op == "now":
                advance(task, "send", 0)
            elif op == "yield":
                advance(task, "send", None)
            else:
                raise SimError("syscall %r not supported in sampling" % (op,))
        visit(store, [t["ret"] for t in tasks])
