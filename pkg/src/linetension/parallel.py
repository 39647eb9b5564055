"""Deterministic parallel map used by scan-style handlers.

Results come back in input order and reductions stay pairwise, so the
thread count never changes any payload byte.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Sequence


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> List:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def pairwise_sum(values: Sequence[float]) -> float:
    """Order-stable summation; identical result for any thread count."""
    vals = list(values)
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = []
        for k in range(0, len(vals) - 1, 2):
            nxt.append(vals[k] + vals[k + 1])
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]
