"""Reproducible crash scenarios and measurement harness.

Everything here is seeded and CPU-only. The scenario corpus covers seven
crash categories; the runner drives each one under different recovery
modes and reports restore time, overhead, and outcome.
"""

from .distributed import DrillReport, run_drill
from .faults import AllocationError, FlakyCall, LockBusyError, MemoryPool, LockTable
from .microbench import MicrobenchReport, run_microbench
from .reporting import summarize, write_report
from .runner import (
    MODES,
    OverheadReport,
    RestoreSample,
    RunReport,
    measure_overhead,
    measure_restore,
    run_scenario,
    run_suite,
)
from .scenarios import CATEGORIES, Scenario, all_scenarios, get_scenario

__all__ = [
    "AllocationError",
    "CATEGORIES",
    "DrillReport",
    "FlakyCall",
    "LockBusyError",
    "LockTable",
    "MODES",
    "MemoryPool",
    "MicrobenchReport",
    "OverheadReport",
    "RestoreSample",
    "RunReport",
    "Scenario",
    "all_scenarios",
    "get_scenario",
    "measure_overhead",
    "measure_restore",
    "run_drill",
    "run_microbench",
    "run_scenario",
    "run_suite",
    "summarize",
    "write_report",
]
