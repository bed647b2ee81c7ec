"""Stage runners: evaluate one function per aggregator either in a fixed
round-robin order or concurrently on a thread pool."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

log = logging.getLogger(__name__)

R = TypeVar("R")


class RoundRobin:
    """Runs actors one after another in ascending id order."""

    deterministic = True

    def __call__(self, fn: Callable[[int], R], actors: Iterable[int]) -> list[R]:
        return [fn(a) for a in sorted(actors)]

    def close(self):
        pass


class Threaded:
    """Runs actors of one stage concurrently; the call is the stage barrier."""

    deterministic = False

    def __init__(self, workers: int | None = None):
        self.pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="agg")

    def __call__(self, fn: Callable[[int], R], actors: Iterable[int]) -> list[R]:
        ids = sorted(actors)
        return list(self.pool.map(fn, ids))

    def close(self):
        self.pool.shutdown(wait=True)


def make_scheduler(deterministic: bool = True, workers: int | None = None):
    return RoundRobin() if deterministic else Threaded(workers)
