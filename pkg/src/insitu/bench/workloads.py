"""Seeded workloads and the shared helpers scenario environments build on.

Workloads are plain source text compiled either directly (the reference
run) or through vaccination. Determinism rule: all randomness flows from
an explicit seed, every batch is materialized ahead of the run, and no
workload depends on wall-clock time for its result.
"""

from __future__ import annotations

import time

import numpy as np

# Paced loop for restore-time experiments. Each iteration costs one
# pause() (default 20 ms), so restart-from-scratch cost scales with the
# crash iteration while in-place resume does not.
PACED_SOURCE = """
def paced(steps, scale):
    w = start_weights(8)
    total = 0.0
    for i in range(steps):
        g = w * 0.001 + drift(i)
        w = w - scale * g
        pause()
        device_sync()
        total = total + float(np.abs(w).sum())
        tick(i)
    return total
"""

# Crash-free loop for overhead measurement. Per-iteration work is one
# opaque kernel call: no array temporaries, no BLAS threads. Allocator
# and threading effects otherwise swamp a sub-1% timing comparison.
GRIND_SOURCE = """
def grind(steps, load):
    acc = 0.0
    x = 1.0
    for i in range(steps):
        x = advance(x, load)
        acc = acc + x
        tick(i)
    return acc
"""


def advance(x: float, n: int) -> float:
    """Deterministic float churn; the grind loop's unit of work."""
    s = x
    for _ in range(n):
        s = (s * 1.000000119 + 0.013) % 3.7
    return s


def start_weights(n: int, seed: int = 7) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def start_matrix(dim: int, seed: int = 11) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((dim, dim))


def make_batches(seed: int, steps: int, rows: int, dim: int,
                 labels: bool = False) -> list[tuple]:
    """Materialize (x, y) pairs for every iteration up front."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(steps):
        x = rng.standard_normal((rows, dim))
        if labels:
            y = (rng.random(rows) > 0.5).astype(float)
        else:
            y = rng.standard_normal(rows)
        out.append((x, y))
    return out


def batch_reader(batches: list[tuple]):
    def batch(i: int) -> tuple:
        x, y = batches[i % len(batches)]
        return x, y
    return batch


def summary_pair(acc: float, w: np.ndarray) -> tuple[float, float]:
    return (acc, float(np.abs(w).sum()))


def list_summary(values: list, w: np.ndarray) -> tuple[float, int, float]:
    return (float(sum(values)), len(values), float(np.abs(w).sum()))


def paced_globals(pace: float = 0.02) -> dict:
    """Globals for PACED_SOURCE; device_sync and tick are swapped per run."""
    def drift(i: int) -> np.ndarray:
        return np.full(8, 0.0005 * ((i % 5) - 2))

    return {
        "np": np,
        "start_weights": start_weights,
        "drift": drift,
        "pause": lambda: time.sleep(pace),
        "device_sync": lambda: None,
        "tick": lambda i: None,
    }


def grind_globals() -> dict:
    return {"advance": advance, "tick": lambda i: None}
