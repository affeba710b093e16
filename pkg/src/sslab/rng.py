"""Counter-based random streams.

Every random quantity in the package is drawn from a Philox generator keyed
by ``(seed, stream)``.  Two streams never share state, so the numbers a work
item sees depend only on its key and not on the order or thread in which
items are executed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ArgumentError

# Stream identifiers for the simulation design.  Bootstrap replicates and
# Monte Carlo repetitions use their own offsets so they never collide.
STREAM_PRICES = 1
STREAM_INCOME = 2
STREAM_INSTRUMENT = 3
STREAM_CHARACTERISTICS = 4
STREAM_FIRST_STAGE = 5
STREAM_HETEROGENEITY = 6
STREAM_ORACLE = 7
STREAM_BOOTSTRAP = 1_000_000
STREAM_MONTE_CARLO = 2_000_000

_MASK64 = (1 << 64) - 1


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Return the generator for ``(seed, stream_id)``."""
    if seed < 0 or stream_id < 0:
        raise ArgumentError("seed and stream id must be non-negative")
    key = ((stream_id & _MASK64) << 64) | (seed & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def thread_count() -> int:
    """Worker count from ``SSLAB_THREADS``, defaulting to the logical cores."""
    raw = os.environ.get("SSLAB_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError:
            value = 0
        if value >= 1:
            return value
    return os.cpu_count() or 1


def parallel_map(func, items, threads: int | None = None) -> list:
    """Map ``func`` over ``items`` preserving input order.

    Results are identical for any thread count because each item carries its
    own random stream and the output order is the input order.
    """
    items = list(items)
    n_threads = thread_count() if threads is None else max(1, int(threads))
    if n_threads == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(func, items))
