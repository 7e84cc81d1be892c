"""Exactly-once stateful serverless workflow runtime over a simulated
row-atomic NoSQL store, with deterministic fault injection.

Core layers:

- ``store``      the simulated storage substrate (rows, conditional writes)
- ``sim``        deterministic cooperative scheduler with crash injection
- ``daal``       linked write-log rows and the exactly-once wrappers
- ``invoke``     cross-SSF invocation with the callback protocol
- ``txn``        wait-die 2PL, shadow staging, commit/abort cascade
- ``collectors`` intent relaunch and garbage collection
- ``harness``    workflows, example apps, checkers, scenarios, CLI
"""

from .store import C, U, Store, TableSchema, CapacityError, StoreError
from .sim import FaultPlan, GcConfig, Scheduler, enumerate_schedules
from .runtime import Env, Runtime, WorkflowViolation
from .txn import TxnAbortSignal, TxnContext

__all__ = [
    "C", "U", "Store", "TableSchema", "CapacityError", "StoreError",
    "FaultPlan", "GcConfig", "Scheduler", "enumerate_schedules",
    "Env", "Runtime", "WorkflowViolation",
    "TxnAbortSignal", "TxnContext",
]
