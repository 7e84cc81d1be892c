from .workflow import WorkflowDef, build_runtime, load_workflow, register
from .scenario import ScenarioResult, run_scenario, run_reference
from . import apps as _apps  # registers the builtin handlers

__all__ = ["WorkflowDef", "build_runtime", "load_workflow", "register",
           "ScenarioResult", "run_scenario", "run_reference"]
