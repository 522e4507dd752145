"""Drives scenarios through recovery modes and times what matters.

Restore time is the gap between the crash and the end of the iteration
that crashed, read from probe timestamps. For in-place recovery that gap
covers the fix session plus the tail of one iteration; for
restart-from-scratch it covers a whole rerun up to the same point. Both
legs of a comparison read the same probe indices, so neither mode gets a
flattering definition.

Modes:
  * ``in-situ``: vaccinated run, scripted fix applied at the crash.
  * ``restart``: plain run crashes, then the repaired job reruns from
    scratch in a fresh environment.
  * ``pass-only``: in-situ but the only verb available is retry.
  * ``no-fd``: in-situ but the entry function is not decomposed, so a
    restart inside a loop is illegal and only pre-loop crashes heal.
"""

from __future__ import annotations

import gc
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..recovery import FixProcedure, RecoveryCommand, ScriptSource
from ..vaccinate import RecoveryOptions, vaccinate_source
from .faults import FlakyCall, Probe
from .scenarios import Scenario, all_scenarios, get_scenario
from .workloads import GRIND_SOURCE, PACED_SOURCE, grind_globals, paced_globals

MODES = ("in-situ", "restart", "pass-only", "no-fd")


class TimingScript(ScriptSource):
    """Scripted command source that timestamps the first crash it sees."""

    def __init__(self, procedures):
        super().__init__(procedures)
        self.first_crash: float | None = None
        self.crashes = 0

    def begin(self, event) -> None:
        if self.first_crash is None:
            self.first_crash = time.perf_counter()
        self.crashes += 1
        super().begin(event)


@dataclass
class RunReport:
    scenario: str
    category: str
    mode: str
    outcome: str                     # recovered | failed | not-applicable
    restore_time_s: float | None
    final_metric: object
    expected: object
    crashed: bool
    overhead_fraction: float | None = None
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "category": self.category,
            "mode": self.mode,
            "outcome": self.outcome,
            "restore_time_s": self.restore_time_s,
            "final_metric": repr(self.final_metric),
            "expected": repr(self.expected),
            "crashed": self.crashed,
            "overhead_fraction": self.overhead_fraction,
            "detail": self.detail,
        }


def _load(source: str, entry: str, globals_ns: dict):
    exec(compile(source, f"<{entry}>", "exec"), globals_ns)
    return globals_ns[entry]


def _fresh(root: Path, name: str) -> Path:
    p = root / name
    p.mkdir()
    return p


def _reference(scenario: Scenario, scratch: Path):
    env = scenario.build(scratch, False)
    probe = Probe(env.hooks)
    env.globals["tick"] = probe
    fn = _load(scenario.restart_source, scenario.entry, env.globals)
    return fn(*scenario.args)


def run_scenario(scenario: Scenario | str, mode: str = "in-situ",
                 workdir: str | Path | None = None) -> RunReport:
    """One scenario through one mode; returns the verdict and timings.

    ``recovered`` requires bit-equality with the reference value, not
    just a run that reaches the return statement.
    """
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    with tempfile.TemporaryDirectory(prefix=f"{scenario.name}-",
                                     dir=workdir) as td:
        root = Path(td)
        expected = _reference(scenario, _fresh(root, "reference"))
        if mode == "restart":
            return _run_restart(scenario, root, expected)
        return _run_insitu(scenario, root, expected, mode)


def _run_insitu(scenario: Scenario, root: Path, expected, mode: str) -> RunReport:
    env = scenario.build(_fresh(root, "live"), True)
    probe = Probe(env.hooks)
    env.globals["tick"] = probe
    if mode == "pass-only":
        script = TimingScript([FixProcedure([RecoveryCommand("pass")])])
        allowed = ("pass",)
        decompose = True
    else:
        script = TimingScript([scenario.fix()])
        allowed = ("pass", "action", "surgery")
        decompose = mode != "no-fd"
    options = RecoveryOptions(allowed_commands=allowed, source=script,
                              interactive="never")
    prog = vaccinate_source(scenario.source, scenario.entry, env.globals,
                            options=options, decompose=decompose)
    try:
        value = prog.entry(*scenario.args)
    except Exception as exc:
        return RunReport(scenario.name, scenario.category, mode, "failed",
                         None, None, expected,
                         crashed=script.first_crash is not None,
                         detail=f"{type(exc).__name__}: {exc}")
    restore = None
    if script.first_crash is not None and scenario.crash_iter is not None:
        done = probe.times.get(scenario.crash_iter)
        if done is not None:
            restore = done - script.first_crash
    if value == expected:
        return RunReport(scenario.name, scenario.category, mode, "recovered",
                         restore, value, expected, script.first_crash is not None)
    return RunReport(scenario.name, scenario.category, mode, "failed",
                     restore, value, expected, script.first_crash is not None,
                     detail=f"completed with wrong value: {value!r} != {expected!r}")


def _run_restart(scenario: Scenario, root: Path, expected) -> RunReport:
    env = scenario.build(_fresh(root, "armed"), True)
    probe = Probe(env.hooks)
    env.globals["tick"] = probe
    fn = _load(scenario.source, scenario.entry, env.globals)
    t_crash = None
    try:
        fn(*scenario.args)
    except Exception:
        t_crash = time.perf_counter()
    rerun_env = scenario.build(_fresh(root, "rerun"), False)
    rerun_probe = Probe(rerun_env.hooks)
    rerun_env.globals["tick"] = rerun_probe
    fixed = _load(scenario.restart_source, scenario.entry, rerun_env.globals)
    try:
        value = fixed(*scenario.args)
    except Exception as exc:
        return RunReport(scenario.name, scenario.category, "restart", "failed",
                         None, None, expected, crashed=t_crash is not None,
                         detail=f"rerun crashed: {type(exc).__name__}: {exc}")
    restore = None
    if t_crash is not None and scenario.crash_iter is not None:
        done = rerun_probe.times.get(scenario.crash_iter)
        if done is not None:
            restore = done - t_crash
    outcome = "recovered" if value == expected else "failed"
    detail = "" if outcome == "recovered" else (
        f"rerun value diverged: {value!r} != {expected!r}")
    return RunReport(scenario.name, scenario.category, "restart", outcome,
                     restore, value, expected, t_crash is not None,
                     detail=detail)


def run_suite(modes=("in-situ",), workdir: str | Path | None = None
              ) -> list[RunReport]:
    out = []
    for scenario in all_scenarios():
        for mode in modes:
            out.append(run_scenario(scenario, mode, workdir))
    return out


# ------------------------------------------------------------ measurements


@dataclass
class RestoreSample:
    mode: str
    crash_iter: int
    steps: int
    pace: float
    restore_s: float
    total: float


def measure_restore(crash_iter: int, steps: int = 1000, pace: float = 0.02,
                    mode: str = "in-situ") -> RestoreSample:
    """Paced loop, one transient crash at ``crash_iter``, timed recovery.

    Restore time runs from the crash to the timestamp at the end of
    iteration ``crash_iter``: in ``in-situ`` mode that is the fix session
    plus the tail of one iteration, in ``restart`` mode it is a rerun
    from iteration zero up to the same point.
    """
    if not 0 <= crash_iter < steps:
        raise ValueError("crash_iter must fall inside the loop")

    def arm(g: dict) -> None:
        g["device_sync"] = FlakyCall(
            lambda: None, crash_iter + 1,
            lambda: OSError("device sync timed out"))

    # a cycle collection landing inside the sub-ms recovery window would
    # dominate the sample, and its odds grow with the crash iteration;
    # nothing here allocates cycles, so park the collector for the leg
    gc.collect()
    gc.disable()
    try:
        if mode == "in-situ":
            g = paced_globals(pace)
            arm(g)
            probe = Probe()
            g["tick"] = probe
            script = TimingScript([FixProcedure([RecoveryCommand("pass")])])
            prog = vaccinate_source(PACED_SOURCE, "paced", g,
                                    options=RecoveryOptions(source=script,
                                                            interactive="never"))
            total = prog.entry(steps, 0.01)
            if script.first_crash is None:
                raise RuntimeError("paced run never crashed")
            return RestoreSample(mode, crash_iter, steps, pace,
                                 probe.times[crash_iter] - script.first_crash,
                                 total)
        if mode != "restart":
            raise ValueError(f"unknown mode {mode!r}")
        g = paced_globals(pace)
        arm(g)
        g["tick"] = Probe()
        fn = _load(PACED_SOURCE, "paced", g)
        try:
            fn(steps, 0.01)
            raise RuntimeError("paced run never crashed")
        except OSError:
            t_crash = time.perf_counter()
        g2 = paced_globals(pace)
        probe = Probe()
        g2["tick"] = probe
        total = _load(PACED_SOURCE, "paced", g2)(steps, 0.01)
        return RestoreSample(mode, crash_iter, steps, pace,
                             probe.times[crash_iter] - t_crash, total)
    finally:
        gc.enable()


@dataclass
class OverheadReport:
    fraction: float                  # mean over repetitions of (T_e - T_o) / T_o
    per_rep: list[float] = field(default_factory=list)
    baseline_s: float = 0.0          # mean plain call
    vaccinated_s: float = 0.0        # mean vaccinated call
    unstable: bool = False

    def to_json(self) -> dict:
        return {"fraction": self.fraction, "per_rep": self.per_rep,
                "baseline_s": self.baseline_s,
                "vaccinated_s": self.vaccinated_s, "unstable": self.unstable}


def measure_overhead(source: str = GRIND_SOURCE, entry: str = "grind",
                     make_globals=grind_globals, args: tuple = (4, 48000),
                     reps: int = 3, pairs: int = 60) -> OverheadReport:
    """Relative slowdown of the vaccinated workload, crash-free.

    The effect is well below this machine's scheduling and clock noise,
    so three defenses at once: CPU time instead of wall time (excludes
    descheduled gaps), A-B-B-A interleaving at millisecond grain (puts
    both legs under the same frequency drift), and a median over calls
    within each repetition (spikes land on single calls). The reported
    fraction is the mean over repetitions. Both programs must return
    identical values or the comparison is meaningless and we refuse to
    report one.
    """
    plain = _load(source, entry, make_globals())
    prog = vaccinate_source(source, entry, make_globals())
    want, got = plain(*args), prog.entry(*args)   # also warms both paths
    if want != got:
        raise RuntimeError(f"vaccinated run diverged: {got!r} != {want!r}")

    def timed(fn) -> float:
        t0 = time.thread_time()
        fn(*args)
        return time.thread_time() - t0

    def trimmed_mean(xs: list[float], cut: float = 0.2) -> float:
        xs = sorted(xs)
        k = int(len(xs) * cut)
        kept = xs[k:len(xs) - k] or xs
        return sum(kept) / len(kept)

    per_rep: list[float] = []
    t_plain: list[float] = []
    t_vac: list[float] = []
    for _ in range(reps):
        fractions: list[float] = []
        for _ in range(pairs):
            a1 = timed(plain)
            b1 = timed(prog.entry)
            b2 = timed(prog.entry)
            a2 = timed(plain)
            fractions.append((b1 + b2) / (a1 + a2) - 1.0)
            t_plain += [a1, a2]
            t_vac += [b1, b2]
        per_rep.append(trimmed_mean(fractions))
    fraction = sum(per_rep) / len(per_rep)
    unstable = (max(per_rep) - min(per_rep)) > 0.01
    return OverheadReport(fraction, per_rep,
                          statistics.median(t_plain), statistics.median(t_vac),
                          unstable)
