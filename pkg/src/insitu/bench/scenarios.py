"""Crash scenarios: small numeric jobs, each with one planted defect and a fix.

Every scenario fixes a seed and materializes its data up front, so the
only nondeterminism left is the crash itself. The scripted in-place fix
and the offline repair (patched source or sanitized environment) are
written to produce bit-identical results; the harness compares final
metrics with ``==``, never with a tolerance. A scenario whose fix cannot
restore the reference value is marked ``recoverable=False`` on purpose.

Conventions:
  * ``args[0]`` is the iteration count and the loop variable is ``i``.
  * The loop body ends with ``tick(i)``; the harness swaps in a Probe.
  * ``build(scratch, armed)`` returns the globals and the iteration
    hooks; ``armed=False`` disarms environment faults for reference and
    rerun legs, while code defects are present either way.
"""

from __future__ import annotations

import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..recovery import FixProcedure, RecoveryCommand
from .faults import FlakyCall, LockTable, MemoryPool
from .workloads import (
    list_summary,
    make_batches,
    batch_reader,
    start_matrix,
    start_weights,
    summary_pair,
)

BLOCK = 1 << 12

API_MISUSE = "api-misuse"
TENSOR_MISMATCH = "tensor-mismatch"
RESOURCE_BUG = "resource-bug"
CONTENTION = "contention"
PATH_PROBLEM = "path-problem"
EXCEPTIONAL_DATA = "exceptional-data"
RUNTIME_ERROR = "runtime-error"

CATEGORIES = (
    API_MISUSE,
    TENSOR_MISMATCH,
    RESOURCE_BUG,
    CONTENTION,
    PATH_PROBLEM,
    EXCEPTIONAL_DATA,
    RUNTIME_ERROR,
)


@dataclass
class Env:
    """What a scenario run needs besides source text."""

    globals: dict
    hooks: dict[int, Callable[[], None]] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    category: str
    entry: str
    source: str
    args: tuple
    commands: tuple[RecoveryCommand, ...]
    build: Callable[[Path, bool], Env]
    crash_iter: int | None          # iteration whose body crashes; None: before the loop
    pre_loop: bool = False
    recoverable: bool = True
    patched: str | None = None      # offline repair; None means the source was never wrong

    def fix(self) -> FixProcedure:
        return FixProcedure(list(self.commands))

    @property
    def restart_source(self) -> str:
        return self.patched if self.patched is not None else self.source


def _cmd(kind: str, payload: str | None = None) -> RecoveryCommand:
    return RecoveryCommand(kind, payload)


# shared env helpers, injected by name


def save_array(out_dir: Path, i: int, w: np.ndarray) -> None:
    (out_dir / f"w{i:04d}.txt").write_text(repr(float(np.abs(w).sum())))


def read_scale(path: Path) -> float:
    return float(path.read_text())


def _soft(m: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-m))


def _separation(margin: np.ndarray, y: np.ndarray) -> float:
    pos = margin[y == 1.0]
    neg = margin[y == 0.0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("separation undefined: window holds one class")
    return float(pos.mean() - neg.mean())


def _window_stats(history: list) -> float:
    if not history:
        return 0.0
    return float(np.mean(history))


_ALL: list[Scenario] = []


def _register(s: Scenario) -> Scenario:
    _ALL.append(s)
    return s


# ------------------------------------------------------------- api misuse

SCALAR_INDEX_SRC = """
def track_error(steps, dim):
    w = start_weights(dim)
    worst = 0.0
    total = 0.0
    for i in range(steps):
        x, y = batch(i)
        err = x @ w - y
        batch_loss = np.mean(err ** 2)
        worst = max(worst, float(batch_loss[0]))
        total = total + float(batch_loss)
        w = w - 0.01 * (x.T @ err) / len(y)
        tick(i)
    return total, worst
"""

SCALAR_INDEX_FIXED = """
def track_error(steps, dim):
    w = start_weights(dim)
    worst = 0.0
    total = 0.0
    for i in range(steps):
        x, y = batch(i)
        err = x @ w - y
        batch_loss = np.mean(err ** 2)
        worst = max(worst, float(batch_loss))
        total = total + float(batch_loss)
        w = w - 0.01 * (x.T @ err) / len(y)
        tick(i)
    return total, worst
"""


def _build_scalar_index(scratch: Path, armed: bool) -> Env:
    batches = make_batches(101, 12, 10, 6)
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches)})


_register(Scenario(
    name="scalar-index",
    category=API_MISUSE,
    entry="track_error",
    source=SCALAR_INDEX_SRC,
    args=(12, 6),
    commands=(_cmd("surgery", SCALAR_INDEX_FIXED),),
    build=_build_scalar_index,
    crash_iter=0,
    patched=SCALAR_INDEX_FIXED,
))

FLAT_AXIS_SRC = """
def periodic_eval(steps, dim):
    w = start_weights(dim)
    history = []
    for i in range(steps):
        x, y = batch(i)
        err = x @ w - y
        w = w - 0.01 * (x.T @ err) / len(y)
        if i % 10 == 9:
            scores = np.mean(err, axis=1)
            history.append(float(np.min(scores)))
        tick(i)
    return list_summary(history, w)
"""

FLAT_AXIS_FIXED = """
def periodic_eval(steps, dim):
    w = start_weights(dim)
    history = []
    for i in range(steps):
        x, y = batch(i)
        err = x @ w - y
        w = w - 0.01 * (x.T @ err) / len(y)
        if i % 10 == 9:
            scores = np.mean(err, axis=0)
            history.append(float(np.min(scores)))
        tick(i)
    return list_summary(history, w)
"""


def _build_flat_axis(scratch: Path, armed: bool) -> Env:
    batches = make_batches(102, 24, 10, 6)
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches), "list_summary": list_summary})


_register(Scenario(
    name="flat-axis",
    category=API_MISUSE,
    entry="periodic_eval",
    source=FLAT_AXIS_SRC,
    args=(24, 6),
    commands=(_cmd("surgery", FLAT_AXIS_FIXED),),
    build=_build_flat_axis,
    crash_iter=9,
    patched=FLAT_AXIS_FIXED,
))

# The audit call destroys its input on the way out. Retrying completes the
# run but the downstream means are computed over a truncated history, so
# the final metric cannot match the reference. Kept as the suite's honest
# negative: recovery that merely continues is not recovery.
CONSUMED_AUDIT_SRC = """
def audited(steps, dim):
    w = start_weights(dim)
    history = []
    audits = []
    for i in range(steps):
        x, y = batch(i)
        err = x @ w - y
        history.append(float(np.mean(err ** 2)))
        w = w - 0.01 * (x.T @ err) / len(y)
        if i == audit_at:
            audits.append(checkpoint_stats(history))
        tick(i)
    return float(np.mean(history)), audits[0], float(np.abs(w).sum())
"""


def _build_consumed_audit(scratch: Path, armed: bool) -> Env:
    batches = make_batches(103, 30, 10, 6)
    if armed:
        stats = FlakyCall(
            _window_stats, 1,
            lambda: TypeError("stats buffer was consumed mid-audit"),
            before=lambda history: history.clear())
    else:
        stats = _window_stats
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches), "audit_at": 12,
                "checkpoint_stats": stats})


_register(Scenario(
    name="consumed-audit",
    category=API_MISUSE,
    entry="audited",
    source=CONSUMED_AUDIT_SRC,
    args=(30, 6),
    commands=(_cmd("pass"),),
    build=_build_consumed_audit,
    crash_iter=12,
    recoverable=False,
))


# -------------------------------------------------------- tensor mismatch

RAGGED_BATCH_SRC = """
def reshaped(steps, dim):
    w = start_weights(dim)
    total = 0.0
    for i in range(steps):
        x, y = batch(i)
        flat = x.reshape(rows, dim)
        err = flat @ w - y
        total = total + float(np.mean(err ** 2))
        w = w - 0.01 * (flat.T @ err) / len(y)
        tick(i)
    return summary_pair(total, w)
"""

RAGGED_BATCH_FIXED = """
def reshaped(steps, dim):
    w = start_weights(dim)
    total = 0.0
    for i in range(steps):
        x, y = batch(i)
        flat = x.reshape(-1, dim)
        err = flat @ w - y
        total = total + float(np.mean(err ** 2))
        w = w - 0.01 * (flat.T @ err) / len(y)
        tick(i)
    return summary_pair(total, w)
"""


def _build_ragged_batch(scratch: Path, armed: bool) -> Env:
    # batch 7 carries two extra rows; the data is legitimate, the reshape is not
    rng = np.random.default_rng(104)
    batches = []
    for i in range(20):
        n = 11 if i == 7 else 9
        batches.append((rng.standard_normal((n, 5)), rng.standard_normal(n)))
    return Env({"np": np, "start_weights": start_weights, "rows": 9,
                "batch": batch_reader(batches), "summary_pair": summary_pair})


_register(Scenario(
    name="ragged-batch",
    category=TENSOR_MISMATCH,
    entry="reshaped",
    source=RAGGED_BATCH_SRC,
    args=(20, 5),
    commands=(_cmd("surgery", RAGGED_BATCH_FIXED),),
    build=_build_ragged_batch,
    crash_iter=7,
    patched=RAGGED_BATCH_FIXED,
))

TEXT_BATCH_SRC = """
def typed_stream(steps, dim):
    w = start_weights(dim)
    total = 0.0
    for i in range(steps):
        x, y = batch(i)
        pred = x @ w
        err = pred - y
        total = total + float(np.mean(err ** 2))
        w = w - 0.01 * (x.T @ err) / len(y)
        tick(i)
    return summary_pair(total, w)
"""


def _build_text_batch(scratch: Path, armed: bool) -> Env:
    batches = make_batches(105, 20, 9, 5)
    x6, y6 = batches[6]
    # str(float64) round-trips exactly, so casting back recovers the
    # original values bit for bit; the ingest fix and the sanitized rerun
    # therefore agree.
    poisoned = x6.astype(str)
    batches[6] = (poisoned if armed else poisoned.astype(float), y6)
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches), "summary_pair": summary_pair})


_register(Scenario(
    name="text-batch",
    category=TENSOR_MISMATCH,
    entry="typed_stream",
    source=TEXT_BATCH_SRC,
    args=(20, 5),
    commands=(_cmd("action", "x = x.astype(float)"), _cmd("pass")),
    build=_build_text_batch,
    crash_iter=6,
))


# ------------------------------------------------------------ resource bug

EAGER_BUFFER_SRC = """
def buffered(steps, dim):
    reserve = 24
    buf = pool.alloc(reserve * block)
    x = start_matrix(dim)
    acc = 0.0
    for i in range(steps):
        y = x @ x
        acc = acc + float(y[0, 0])
        x = 0.999 * x + 0.001
        tick(i)
    pool.free(buf)
    return acc
"""

EAGER_BUFFER_FIXED = """
def buffered(steps, dim):
    reserve = 4
    buf = pool.alloc(reserve * block)
    x = start_matrix(dim)
    acc = 0.0
    for i in range(steps):
        y = x @ x
        acc = acc + float(y[0, 0])
        x = 0.999 * x + 0.001
        tick(i)
    pool.free(buf)
    return acc
"""


def _build_eager_buffer(scratch: Path, armed: bool) -> Env:
    return Env({"np": np, "start_matrix": start_matrix,
                "pool": MemoryPool(8 * BLOCK), "block": BLOCK})


_register(Scenario(
    name="eager-buffer",
    category=RESOURCE_BUG,
    entry="buffered",
    source=EAGER_BUFFER_SRC,
    args=(16, 8),
    commands=(_cmd("action", "reserve = 4"), _cmd("pass")),
    build=_build_eager_buffer,
    crash_iter=None,
    pre_loop=True,
    patched=EAGER_BUFFER_FIXED,
))

HOARDING_CACHE_SRC = """
def cached_eval(steps, dim):
    keep = 500
    cache = {}
    x = start_matrix(dim)
    acc = 0.0
    for i in range(steps):
        while len(cache) > keep:
            pool.free(cache.pop(min(cache)))
        cache[i] = pool.alloc(block)
        y = x @ x
        acc = acc + float(y[0, 0])
        x = 0.999 * x + 0.001
        tick(i)
    for h in cache.values():
        pool.free(h)
    return acc
"""

HOARDING_CACHE_FIXED = """
def cached_eval(steps, dim):
    keep = 4
    cache = {}
    x = start_matrix(dim)
    acc = 0.0
    for i in range(steps):
        while len(cache) > keep:
            pool.free(cache.pop(min(cache)))
        cache[i] = pool.alloc(block)
        y = x @ x
        acc = acc + float(y[0, 0])
        x = 0.999 * x + 0.001
        tick(i)
    for h in cache.values():
        pool.free(h)
    return acc
"""

HOARDING_CACHE_ACTION = """\
for h in cache.values():
    pool.free(h)
cache.clear()
keep = 4"""


def _build_hoarding_cache(scratch: Path, armed: bool) -> Env:
    return Env({"np": np, "start_matrix": start_matrix,
                "pool": MemoryPool(6 * BLOCK), "block": BLOCK})


_register(Scenario(
    name="hoarding-cache",
    category=RESOURCE_BUG,
    entry="cached_eval",
    source=HOARDING_CACHE_SRC,
    args=(20, 8),
    commands=(_cmd("action", HOARDING_CACHE_ACTION), _cmd("pass")),
    build=_build_hoarding_cache,
    crash_iter=6,
    patched=HOARDING_CACHE_FIXED,
))


# --------------------------------------------------------------- contention

SEIZED_OUTPUT_SRC = """
def publish(steps):
    w = start_weights(8)
    channel = "primary"
    grant = locks.acquire(channel)
    total = 0.0
    for i in range(steps):
        w = w * 0.99 + 0.01
        total = total + float(np.abs(w).sum())
        tick(i)
    locks.release(grant)
    return total
"""


def _build_seized_output(scratch: Path, armed: bool) -> Env:
    locks = LockTable(scratch)
    if armed:
        # a real sibling process grabs the channel before we start
        marker = scratch / "primary.lock"
        code = (f"import pathlib; "
                f"pathlib.Path({str(marker)!r}).write_text('sibling')")
        subprocess.run([sys.executable, "-c", code], check=True)
    return Env({"np": np, "start_weights": start_weights, "locks": locks})


_register(Scenario(
    name="seized-output",
    category=CONTENTION,
    entry="publish",
    source=SEIZED_OUTPUT_SRC,
    args=(16,),
    commands=(_cmd("action", "channel = 'spare'"), _cmd("pass")),
    build=_build_seized_output,
    crash_iter=None,
    pre_loop=True,
))

BUSY_CHECKPOINT_SRC = """
def checkpointed(steps):
    w = start_weights(8)
    ckpt = "ckpt_main"
    total = 0.0
    for i in range(steps):
        w = w * 0.995 + 0.002
        total = total + float(np.abs(w).sum())
        if i % 6 == 5:
            grant = locks.acquire(ckpt)
            save_array(out_dir, i, w)
            locks.release(grant)
        tick(i)
    return total
"""


def _build_busy_checkpoint(scratch: Path, armed: bool) -> Env:
    locks = LockTable(scratch)
    out = scratch / "ckpts"
    out.mkdir(exist_ok=True)
    hooks = {8: lambda: locks.occupy("ckpt_main")} if armed else {}
    return Env({"np": np, "start_weights": start_weights, "locks": locks,
                "out_dir": out, "save_array": save_array}, hooks)


_register(Scenario(
    name="busy-checkpoint",
    category=CONTENTION,
    entry="checkpointed",
    source=BUSY_CHECKPOINT_SRC,
    args=(24,),
    commands=(_cmd("action", "ckpt = 'ckpt_spare'"), _cmd("pass")),
    build=_build_busy_checkpoint,
    crash_iter=11,
))


# ------------------------------------------------------------ path problem

MOVED_OUTDIR_SRC = """
def archiving(steps):
    w = start_weights(8)
    out_dir = primary_dir
    total = 0.0
    for i in range(steps):
        w = w * 0.99 + 0.01
        total = total + float(np.abs(w).sum())
        if i % 8 == 7:
            save_array(out_dir, i, w)
        tick(i)
    return total
"""


def _build_moved_outdir(scratch: Path, armed: bool) -> Env:
    primary = scratch / "outbox"
    spare = scratch / "outbox_spare"
    primary.mkdir(exist_ok=True)
    spare.mkdir(exist_ok=True)
    hooks = {}
    if armed:
        hooks[12] = lambda: primary.rename(scratch / "outbox.gone")
    return Env({"np": np, "start_weights": start_weights,
                "primary_dir": primary, "spare_dir": spare,
                "save_array": save_array}, hooks)


_register(Scenario(
    name="moved-outdir",
    category=PATH_PROBLEM,
    entry="archiving",
    source=MOVED_OUTDIR_SRC,
    args=(24,),
    commands=(_cmd("action", "out_dir = spare_dir"), _cmd("pass")),
    build=_build_moved_outdir,
    crash_iter=15,
))

STALE_MANIFEST_SRC = """
def rescaled(steps):
    w = start_weights(8)
    scale = 1.0
    total = 0.0
    for i in range(steps):
        w = w * 0.99 + scale * 0.01
        total = total + float(np.abs(w).sum())
        if i == refresh_at:
            scale = read_scale(data_dir / "scale.cfg")
        tick(i)
    return total
"""

STALE_MANIFEST_FIXED = """
def rescaled(steps):
    w = start_weights(8)
    scale = 1.0
    total = 0.0
    for i in range(steps):
        w = w * 0.99 + scale * 0.01
        total = total + float(np.abs(w).sum())
        if i == refresh_at:
            scale = read_scale(data_dir / "scale.txt")
        tick(i)
    return total
"""


def _build_stale_manifest(scratch: Path, armed: bool) -> Env:
    data = scratch / "data"
    data.mkdir(exist_ok=True)
    # the manifest was renamed in the last layout change; code still reads .cfg
    (data / "scale.txt").write_text("1.25")
    return Env({"np": np, "start_weights": start_weights,
                "data_dir": data, "refresh_at": 10, "read_scale": read_scale})


_register(Scenario(
    name="stale-manifest",
    category=PATH_PROBLEM,
    entry="rescaled",
    source=STALE_MANIFEST_SRC,
    args=(24,),
    commands=(_cmd("surgery", STALE_MANIFEST_FIXED),),
    build=_build_stale_manifest,
    crash_iter=10,
    patched=STALE_MANIFEST_FIXED,
))


# ------------------------------------------------------- exceptional data

ONE_CLASS_SRC = """
def classify_stream(steps):
    w = start_weights(4)
    quality = []
    for i in range(steps):
        x, y = batch(i)
        margin = x @ w
        sep = separation(margin, y)
        quality.append(sep)
        w = w + 0.05 * (x.T @ (y - soft(margin))) / len(y)
        tick(i)
    return list_summary(quality, w)
"""

ONE_CLASS_FIXED = """
def classify_stream(steps):
    w = start_weights(4)
    quality = []
    for i in range(steps):
        x, y = batch(i)
        margin = x @ w
        if np.unique(y).size > 1:
            sep = separation(margin, y)
            quality.append(sep)
        w = w + 0.05 * (x.T @ (y - soft(margin))) / len(y)
        tick(i)
    return list_summary(quality, w)
"""


def _build_one_class(scratch: Path, armed: bool) -> Env:
    # every window balanced except 8, which is single-class on purpose;
    # the guard must skip it and must not change any other window
    rng = np.random.default_rng(106)
    base = np.array([0.0, 1.0] * 6)
    batches = []
    for i in range(20):
        x = rng.standard_normal((12, 4))
        y = np.ones(12) if i == 8 else rng.permutation(base)
        batches.append((x, y))
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches), "separation": _separation,
                "soft": _soft, "list_summary": list_summary})


_register(Scenario(
    name="one-class-window",
    category=EXCEPTIONAL_DATA,
    entry="classify_stream",
    source=ONE_CLASS_SRC,
    args=(20,),
    commands=(_cmd("surgery", ONE_CLASS_FIXED),),
    build=_build_one_class,
    crash_iter=8,
    patched=ONE_CLASS_FIXED,
))

NAN_BURST_SRC = """
def denoised(steps, dim):
    w = start_weights(dim)
    losses = []
    for i in range(steps):
        x, y = batch(i)
        pred = x @ w
        loss = float(np.mean((pred - y) ** 2))
        ensure_finite(loss)
        w = w - 0.05 * (x.T @ (pred - y)) / len(y)
        losses.append(loss)
        tick(i)
    return list_summary(losses, w)
"""

NAN_BURST_ACTION = """\
x = np.nan_to_num(x)
pred = x @ w
loss = float(np.mean((pred - y) ** 2))"""


def ensure_finite(value: float) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss: {value!r}")


def _build_nan_burst(scratch: Path, armed: bool) -> Env:
    batches = make_batches(107, 20, 9, 5)
    x9, y9 = batches[9]
    burst = np.full_like(x9, np.nan)
    # sanitized form mirrors the live fix exactly
    batches[9] = (burst if armed else np.nan_to_num(burst), y9)
    return Env({"np": np, "start_weights": start_weights,
                "batch": batch_reader(batches), "ensure_finite": ensure_finite,
                "list_summary": list_summary})


_register(Scenario(
    name="nan-burst",
    category=EXCEPTIONAL_DATA,
    entry="denoised",
    source=NAN_BURST_SRC,
    args=(20, 5),
    commands=(_cmd("action", NAN_BURST_ACTION), _cmd("pass")),
    build=_build_nan_burst,
    crash_iter=9,
))


# -------------------------------------------------------- runtime error

FLAKY_UPLINK_SRC = """
def export_run(steps):
    w = start_weights(6)
    total = 0.0
    acks = 0
    for i in range(steps):
        g = w * 0.002 + drift(i)
        w = w - 0.1 * g
        total = total + float(np.abs(w).sum())
        if i % 5 == 4:
            acks = acks + push_metrics(i, total)
        tick(i)
    return total, acks
"""


def _build_flaky_uplink(scratch: Path, armed: bool) -> Env:
    sent: list[tuple] = []

    def push(i: int, value: float) -> int:
        sent.append((i, value))
        return 1

    uplink = FlakyCall(push, 3 if armed else None,
                       lambda: ConnectionError("metrics uplink unreachable"))

    def drift(i: int) -> np.ndarray:
        return np.full(6, 0.0005 * ((i % 5) - 2))

    return Env({"np": np, "start_weights": start_weights, "drift": drift,
                "push_metrics": uplink, "sent": sent})


_register(Scenario(
    name="flaky-uplink",
    category=RUNTIME_ERROR,
    entry="export_run",
    source=FLAKY_UPLINK_SRC,
    args=(25,),
    commands=(_cmd("pass"),),
    build=_build_flaky_uplink,
    crash_iter=14,
))

FLAKY_SYNC_SRC = """
def settle(steps, dim):
    x = start_matrix(dim)
    acc = 0.0
    for i in range(steps):
        y = x @ x
        acc = acc + float(y[0, 0])
        x = 0.999 * x + 0.001
        device_sync()
        tick(i)
    return acc
"""


def _build_flaky_sync(scratch: Path, armed: bool) -> Env:
    sync = FlakyCall(lambda: None, 12 if armed else None,
                     lambda: OSError("device sync timed out"))
    return Env({"np": np, "start_matrix": start_matrix, "device_sync": sync})


_register(Scenario(
    name="flaky-sync",
    category=RUNTIME_ERROR,
    entry="settle",
    source=FLAKY_SYNC_SRC,
    args=(20, 8),
    commands=(_cmd("pass"),),
    build=_build_flaky_sync,
    crash_iter=11,
))


SCENARIOS: dict[str, Scenario] = {s.name: s for s in _ALL}


def all_scenarios() -> list[Scenario]:
    return list(_ALL)


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        known = ", ".join(sorted(SCENARIOS))
        raise KeyError(f"unknown scenario {name!r}; known: {known}") from None
