"""Per-operation cost of the instrumentation primitives.

Times the three operations the transform inserts into user code: a
namespace bind, a namespace resolve, and one pass through the crash
barrier. Each is compared against the cost of a single output statement
(a print into a null device) measured in the same process, because that
is the cheapest thing programs in this domain already do once per
iteration without anyone calling it overhead.
"""

from __future__ import annotations

import os
import timeit
from dataclasses import dataclass

from ..context import NamespaceTable

# mirrors the emitted retry construct; the handler re-raises because a
# no-op cell cannot crash, we only pay for entering the machinery
_BARRIER_STMT = """
f = cells['c']
while True:
    try:
        ind = f(act, ns)
        break
    except Exception:
        raise
"""


@dataclass
class MicrobenchReport:
    baseline_s: float                # one output statement
    barrier_s: float                 # one barrier pass, bare call subtracted
    bind_s: float                    # one table write
    resolve_s: float                 # one table read

    def ratios(self) -> dict[str, float]:
        return {
            "barrier": self.barrier_s / self.baseline_s,
            "bind": self.bind_s / self.baseline_s,
            "resolve": self.resolve_s / self.baseline_s,
        }

    def to_json(self) -> dict:
        return {
            "baseline_s": self.baseline_s,
            "barrier_s": self.barrier_s,
            "bind_s": self.bind_s,
            "resolve_s": self.resolve_s,
            "ratios": self.ratios(),
        }


def _per_call(stmt: str, env: dict, number: int, repeat: int = 3) -> float:
    best = min(timeit.repeat(stmt, globals=env, number=number, repeat=repeat))
    return best / number


def run_microbench(number: int = 200_000) -> MicrobenchReport:
    table = NamespaceTable("microbench")
    table["x"] = 1

    with open(os.devnull, "w") as sink:
        baseline = _per_call("print(42, file=sink)", {"sink": sink},
                             max(number // 10, 1))
    bind = _per_call("table['x'] = 1", {"table": table}, number)
    resolve = _per_call("table['x']", {"table": table}, number)

    env = {"cells": {"c": lambda a, n: None}, "act": None, "ns": None}
    wrapped = _per_call(_BARRIER_STMT, env, number)
    bare = _per_call("ind = f(act, ns)",
                     {"f": env["cells"]["c"], "act": None, "ns": None}, number)
    barrier = max(wrapped - bare, 0.0)
    return MicrobenchReport(baseline, barrier, bind, resolve)
