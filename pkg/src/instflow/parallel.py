"""Thread-pool helper used for the data-parallel stages.

Work is always split into the same pieces regardless of the worker count and
results are returned in submission order, so outputs never depend on how many
workers ran them. Reductions that mix pieces are done by the caller in a
fixed order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


class Workers:
    """Ordered map over a shared thread pool; ``count == 1`` runs inline."""

    def __init__(self, count: int | None = 1):
        if count is None or count <= 0:
            count = os.cpu_count() or 1
        self.count = int(count)
        self._pool = ThreadPoolExecutor(max_workers=self.count) if self.count > 1 else None

    def map(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        items = list(items)
        if self._pool is None or len(items) < 2:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self) -> "Workers":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


SERIAL = Workers(1)


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    """Fixed ``[start, stop)`` pieces of ``range(n)``; independent of worker count."""
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def concat_ordered(parts: Sequence[np.ndarray]) -> np.ndarray:
    return parts[0] if len(parts) == 1 else np.concatenate(parts)
