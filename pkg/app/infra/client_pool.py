# -*- coding: utf-8 -*-
import asyncio
import logging
from typing import Callable, List, Sequence, TypeVar

log = logging.getLogger("client_pool")

T = TypeVar("T")
Job = Callable[[], T]


class ClientPool:
    """
    Runs a batch of independent jobs (one per participating client, or one per
    sweep point) on worker threads with a global concurrency limit.

    - Results come back in submission order, never completion order, so the
      aggregation barrier sees the same sequence for any worker count.
    - max_workers <= 1 runs jobs inline on the calling thread.
    - The first failing job's exception is re-raised after all jobs settle.
    """

    def __init__(self, max_workers: int = 1):
        self._max_workers = max(1, int(max_workers))
        log.debug("ClientPool init: max_workers=%d", self._max_workers)

    @property
    def max_workers(self) -> int:
        return self._max_workers

    def run(self, jobs: Sequence[Job]) -> List[T]:
        if not jobs:
            return []
        if self._max_workers <= 1 or len(jobs) == 1:
            return [job() for job in jobs]
        return asyncio.run(self._gather(jobs))

    async def _gather(self, jobs: Sequence[Job]) -> List[T]:
        sema = asyncio.Semaphore(self._max_workers)

        async def _one(idx: int, job: Job):
            async with sema:
                try:
                    return await asyncio.to_thread(job)
                except Exception as e:
                    log.exception("Pool job %d failed: %s", idx, e)
                    raise

        results = await asyncio.gather(*(_one(i, job) for i, job in enumerate(jobs)), return_exceptions=True)
        for res in results:
            if isinstance(res, BaseException):
                raise res
        return list(results)
