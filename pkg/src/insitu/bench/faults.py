"""Fault injectors: controlled stand-ins for flaky devices and scarce resources.

Injectors are deterministic. A fault fires at a configured call index or
iteration and nowhere else, so a scenario run twice produces the same
crash at the same statement.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Callable


class AllocationError(MemoryError):
    """A memory pool request exceeded the remaining capacity."""


class LockBusyError(OSError):
    """A lock is held by someone else and the acquire gave up."""


class FlakyCall:
    """Wraps a callable so chosen invocations raise, then behave again.

    ``fail_on`` counts invocations starting at 1. ``before`` receives the
    call's own arguments and runs right before the raise; scenarios use it
    to model faults that destroy state on their way out.
    """

    def __init__(self, fn: Callable, fail_on: int | set[int] | None,
                 exc: Callable[[], BaseException],
                 before: Callable | None = None):
        self.fn = fn
        self.fail_on = ({fail_on} if isinstance(fail_on, int) else
                        set(fail_on or ()))
        self.exc = exc
        self.before = before
        self.calls = 0
        self.fired = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        if self.calls in self.fail_on:
            self.fired += 1
            if self.before is not None:
                self.before(*args, **kwargs)
            raise self.exc()
        return self.fn(*args, **kwargs)


class MemoryPool:
    """Byte-counted allocator; requests past capacity raise.

    Desk analog of device memory: allocation failures must be cheap,
    deterministic, and must not depend on host RAM or overcommit policy.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.used = 0
        self._sizes: list[int] = []

    def alloc(self, nbytes: int) -> int:
        if nbytes < 0:
            raise ValueError("negative allocation")
        if self.used + nbytes > self.capacity:
            raise AllocationError(
                f"requested {nbytes} bytes with {self.capacity - self.used} free")
        self.used += nbytes
        self._sizes.append(nbytes)
        return len(self._sizes) - 1

    def free(self, handle: int) -> None:
        self.used -= self._sizes[handle]
        self._sizes[handle] = 0

    def free_all(self) -> None:
        self.used = 0
        self._sizes.clear()


class LockTable:
    """Named non-blocking locks over marker files in a scratch directory.

    A lock is busy while its marker file exists. A sibling process (or an
    injector) creates the marker to occupy the lock.
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    def _marker(self, name: str) -> Path:
        return self.root / f"{name}.lock"

    def occupy(self, name: str) -> None:
        self._marker(name).write_text(str(time.time()))

    def vacate(self, name: str) -> None:
        self._marker(name).unlink(missing_ok=True)

    def acquire(self, name: str) -> str:
        if self._marker(name).exists():
            raise LockBusyError(f"lock {name!r} is held")
        self._marker(name).write_text("held")
        return name

    def release(self, token: str) -> None:
        self._marker(token).unlink(missing_ok=True)


class Probe:
    """Iteration counter the harness installs into every workload.

    Workloads call ``tick(i)`` as the last statement of an iteration; the
    probe records a timestamp per index. Restore time is read from these
    timestamps, never from log output. ``on_iter`` hooks run after the
    named iteration completes, which is how environment faults (renamed
    paths, occupied locks) land between iterations.
    """

    def __init__(self, on_iter: dict[int, Callable[[], None]] | None = None):
        self.times: dict[int, float] = {}
        self.on_iter = dict(on_iter or {})

    def __call__(self, i: int) -> None:
        self.times[i] = time.perf_counter()
        hook = self.on_iter.get(i)
        if hook is not None:
            hook()

    def last(self) -> int:
        return max(self.times, default=-1)
