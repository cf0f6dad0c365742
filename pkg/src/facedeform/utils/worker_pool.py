"""Background worker pool for independent per-case and per-sub-cloud work."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import Any, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


class WorkerPool:
    """Manages a thread pool that is started and stopped explicitly.

    Results of :meth:`map_ordered` come back in input order whatever the
    completion order, so output built from them is independent of scheduling.
    """

    def __init__(self, workers: int = 4) -> None:
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self._workers = workers
        self._executor: ThreadPoolExecutor | None = None

    def start(self) -> None:
        """Start the pool (no-op if already running)."""
        if self._executor is not None:
            return
        self._executor = ThreadPoolExecutor(
            max_workers=self._workers, thread_name_prefix="facedeform"
        )
        logger.debug("Worker pool started with %d thread(s)", self._workers)

    def stop(self) -> None:
        """Wait for queued work and shut the pool down."""
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> WorkerPool:
        self.start()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    @property
    def executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            raise RuntimeError("WorkerPool not started")
        return self._executor

    def map_ordered(self, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply ``fn`` to every item concurrently and return results in input order.

        The first exception raised by any call is re-raised here.
        """
        futures = [self.executor.submit(fn, item) for item in items]
        return [f.result() for f in futures]
