#executor.py
import asyncio
import logging
from concurrent.futures import Executor, ProcessPoolExecutor
from contextlib import asynccontextmanager
from typing import Any, AsyncIterator, Callable, Sequence

logger = logging.getLogger(__name__)


async def init_pool(jobs: int) -> Executor | None:
    """Start a process pool for replication fan-out; None means run in-process."""
    if jobs <= 1:
        logger.debug("Running replications in-process")
        return None
    try:
        pool = ProcessPoolExecutor(max_workers=jobs)
        logger.info(f"Started replication pool with {jobs} workers")
        return pool
    except (OSError, NotImplementedError) as e:
        logger.warning(f"Could not start process pool ({e}); falling back to in-process execution")
        return None


async def close_pool(pool: Executor | None):
    if pool:
        pool.shutdown(wait=True)
        logger.info("Replication pool closed.")


@asynccontextmanager
async def replication_pool(jobs: int) -> AsyncIterator[Executor | None]:
    pool = await init_pool(jobs)
    try:
        yield pool
    finally:
        await close_pool(pool)


async def map_ordered(pool: Executor | None, fn: Callable[[Any], Any], tasks: Sequence[Any]) -> list[Any]:
    """Run fn over tasks and return results in task order regardless of completion order."""
    if pool is None:
        return [fn(task) for task in tasks]
    loop = asyncio.get_running_loop()
    futures = [loop.run_in_executor(pool, fn, task) for task in tasks]
    return list(await asyncio.gather(*futures))
