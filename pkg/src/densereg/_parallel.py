"""Deterministic fan-out: contiguous-chunk thread dispatch.

Work is split into at most `threads` contiguous chunks and results are
reassembled in input order, so output never depends on scheduling. Worker
functions must be independent per item (they may share read-only state).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

__all__ = ["parallel_map"]


def _chunked(items: list, workers: int) -> list:
    n = len(items)
    if n == 0:
        return []
    k = min(max(1, workers), n)
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [items[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]

    def run(chunk):
        return [fn(it) for it in chunk]

    chunks = _chunked(items, threads)
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        parts = list(ex.map(run, chunks))
    return [r for part in parts for r in part]
