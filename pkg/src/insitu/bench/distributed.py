"""Multi-worker recovery drill.

Forks a small team of workers that march through a loop in lockstep (a
barrier every iteration), trips the same fault on two of them mid-run,
and checks that one scripted fix heals both: the worker holding the
script becomes the fix host, the other gets the recorded procedure from
the coordinator and replays it. Every worker must finish with exactly
the value a crash-free run produces.
"""

from __future__ import annotations

import multiprocessing
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from ..coordinator import CoordinatedSource, Coordinator
from ..recovery import FixProcedure, RecoveryCommand, ScriptSource
from ..vaccinate import RecoveryOptions, vaccinate_source
from .workloads import start_weights


class BrokenLink(ConnectionError):
    pass


class LinkMonitor:
    """Health check that stays broken once tripped.

    A bare retry keeps failing; recovery has to run ``link.reset()``
    first. That makes the broadcast carry a real repair, not just a
    second attempt.
    """

    def __init__(self, trip_at: int | None = None):
        self.trip_at = trip_at
        self.tripped = False

    def __call__(self, i: int) -> None:
        if self.trip_at is not None and i == self.trip_at:
            self.tripped = True
            self.trip_at = None
        if self.tripped:
            raise BrokenLink(f"uplink health check failed at step {i}")

    def reset(self) -> None:
        self.tripped = False


TEAM_SOURCE = """
def team_run(steps, seed):
    w = start_weights(8, seed)
    total = 0.0
    for i in range(steps):
        sync(i)
        g = w * 0.003 + 0.01 * ((i % 7) - 3)
        w = w - 0.2 * g
        probe_link(i)
        total = total + float(np.abs(w).sum())
        tick(i)
    return total
"""

LINK_FIX = FixProcedure([
    RecoveryCommand("action", "link.reset()"),
    RecoveryCommand("pass"),
])


def _team_env(link: LinkMonitor, sync) -> dict:
    return {
        "np": np,
        "start_weights": start_weights,
        "probe_link": link,
        "link": link,
        "sync": sync,
        "tick": lambda i: None,
    }


def reference_value(steps: int, seed: int) -> float:
    """Crash-free value for one worker, computed without forking."""
    env = _team_env(LinkMonitor(None), lambda i: None)
    code = compile(TEAM_SOURCE, "<team>", "exec")
    exec(code, env)
    return env["team_run"](steps, seed)


def _worker_main(idx, address, steps, seed, fault_iter, armed, scripted,
                 barrier, timeout_s, out) -> None:
    worker_id = f"w{idx}"
    try:
        link = LinkMonitor(fault_iter if idx in armed else None)
        env = _team_env(link, lambda i: barrier.wait(timeout=timeout_s))
        inner = ScriptSource([LINK_FIX]) if idx == scripted else None
        source = CoordinatedSource(inner=inner, address=address,
                                   worker_id=worker_id, timeout=timeout_s)
        options = RecoveryOptions(source=source, interactive="never")
        program = vaccinate_source(TEAM_SOURCE, "team_run", env,
                                   program_id=f"drill:{worker_id}",
                                   options=options)
        value = program.entry(steps, seed)
        # armed workers crashed for sure, so their role is meaningful;
        # the others never spoke to the coordinator
        role = source.role if idx in armed else None
        out.put(("ok", worker_id, value, role))
    except BaseException:
        # free anyone parked at the barrier so the drill fails fast
        try:
            barrier.abort()
        finally:
            out.put(("err", worker_id, traceback.format_exc(), None))


@dataclass(frozen=True)
class DrillReport:
    """Outcome of one drill.

    ``healed_by_relay`` lists the crashed workers that resumed on the
    procedure the coordinator relayed for them, whether it arrived as a
    live broadcast or from the cache when they announced late. Either
    way it is the fix host's recording, replayed verbatim.
    """

    workers: int
    steps: int
    fault_iter: int
    armed: tuple[int, ...]
    fix_host: str | None
    healed_by_relay: tuple[str, ...]
    roles: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    @property
    def ok(self) -> bool:
        if self.failures or set(self.values) != set(self.expected):
            return False
        return all(self.values[w] == self.expected[w] for w in self.expected)

    def to_json(self) -> dict:
        return {
            "workers": self.workers,
            "steps": self.steps,
            "fault_iter": self.fault_iter,
            "armed": list(self.armed),
            "fix_host": self.fix_host,
            "healed_by_relay": list(self.healed_by_relay),
            "roles": dict(self.roles),
            "values": {k: repr(v) for k, v in self.values.items()},
            "expected": {k: repr(v) for k, v in self.expected.items()},
            "failures": dict(self.failures),
            "elapsed_s": self.elapsed_s,
            "ok": self.ok,
        }


def run_drill(workers: int = 4, steps: int = 30, fault_iter: int = 12,
              armed: tuple[int, ...] = (1, 2), base_seed: int = 41,
              timeout_s: float = 30.0) -> DrillReport:
    if len(armed) < 2 or any(not 0 <= a < workers for a in armed):
        raise ValueError("armed must name at least two valid worker indexes")
    if not 0 <= fault_iter < steps:
        raise ValueError("fault_iter outside the run")

    # fork keeps the workers cheap and lets them inherit the barrier
    ctx = multiprocessing.get_context("fork")
    coordinator = Coordinator("127.0.0.1:0").start()
    barrier = ctx.Barrier(workers)
    out = ctx.Queue()
    scripted = armed[0]

    t0 = time.monotonic()
    procs = [
        ctx.Process(target=_worker_main,
                    args=(idx, coordinator.address, steps, base_seed + idx,
                          fault_iter, tuple(armed), scripted, barrier,
                          timeout_s, out),
                    daemon=True)
        for idx in range(workers)
    ]
    for p in procs:
        p.start()

    values: dict[str, float] = {}
    failures: dict[str, str] = {}
    roles: dict[str, str] = {}
    deadline = t0 + timeout_s + 15.0
    try:
        for _ in range(workers):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                status, worker_id, payload, role = out.get(timeout=remaining)
            except Exception:
                break
            if role is not None:
                roles[worker_id] = role
            if status == "ok":
                values[worker_id] = payload
            else:
                failures[worker_id] = payload
        for p in procs:
            p.join(timeout=max(0.0, deadline - time.monotonic()))
        elapsed = time.monotonic() - t0
    finally:
        for p in procs:
            if p.is_alive():
                p.terminate()
        coordinator.close()

    reported = set(values) | set(failures)
    for idx in range(workers):
        wid = f"w{idx}"
        if wid not in reported:
            failures[wid] = "no result before deadline"

    hosts = sorted(w for w, r in roles.items() if r == "fix-host")
    healed = tuple(sorted(w for w, r in roles.items()
                          if r in ("wait", "replay")))
    expected = {f"w{idx}": reference_value(steps, base_seed + idx)
                for idx in range(workers)}
    return DrillReport(
        workers=workers, steps=steps, fault_iter=fault_iter,
        armed=tuple(armed), fix_host=hosts[0] if len(hosts) == 1 else None,
        healed_by_relay=healed, roles=roles, values=values,
        expected=expected, failures=failures, elapsed_s=elapsed,
    )
