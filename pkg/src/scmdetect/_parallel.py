"""Ordered process-pool map; results never depend on the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def map_ordered(fn: Callable, items: Sequence, workers: int | None = 1, chunksize: int = 0) -> list:
    """``[fn(x) for x in items]``, optionally spread over ``workers`` processes."""
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize <= 0:
        chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))


def imap_ordered(fn: Callable, items: Iterable, workers: int | None = 1):
    """Generator flavour of :func:`map_ordered` (used when progress matters)."""
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        for x in items:
            yield fn(x)
        return
    chunksize = max(1, len(items) // (16 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items, chunksize=chunksize)
