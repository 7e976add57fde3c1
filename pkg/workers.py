"""
Bounded fan-out of blocking work over asyncio threads
"""

import asyncio
import logging
import os
from typing import Callable, List, Optional, Sequence, TypeVar

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

T = TypeVar("T")


def default_threads() -> int:
    raw = os.getenv("GAMER_THREADS", "")
    if not raw:
        return min(4, os.cpu_count() or 1)
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"GAMER_THREADS must be an integer, got '{raw}'")
    if threads < 1:
        raise ConfigError(f"GAMER_THREADS must be >= 1, got {threads}")
    return threads


async def gather_bounded(calls: Sequence[Callable[[], T]], threads: int) -> List[T]:
    """Run blocking calls in worker threads, at most `threads` at a time; results keep call order"""
    semaphore = asyncio.Semaphore(threads)

    async def run(call: Callable[[], T]) -> T:
        async with semaphore:
            return await asyncio.to_thread(call)

    return await asyncio.gather(*(run(call) for call in calls))


def run_bounded(calls: Sequence[Callable[[], T]], threads: Optional[int] = None) -> List[T]:
    threads = threads or default_threads()
    if threads < 1:
        raise ConfigError(f"Thread count must be >= 1, got {threads}")
    if threads == 1:
        return [call() for call in calls]
    return asyncio.run(gather_bounded(calls, threads))
