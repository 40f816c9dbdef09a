"""
Reproducible random streams and block-parallel dispatch.

Stream `i` of a run seeded with `seed` is a PCG64 generator (128-bit state, 64-bit
output) whose state is derived by `SeedSequence(seed, spawn_key=(i,))`, i.e. a hash of
the master seed and the stream index. Work is cut into fixed-size blocks that are
merged in block order, so results never depend on how many workers ran them.
"""

from collections import deque
from collections.abc import Callable, Generator, Iterable
from concurrent.futures import ThreadPoolExecutor
from itertools import islice
from typing import TypeVar

import numpy as np

from randchan.errors import InvalidInput

BLOCK_SIZE = 1024

T = TypeVar("T")
U = TypeVar("U")


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """
    The generator for stream `index` of a run seeded with `seed`.
    """
    if seed < 0 or index < 0:
        raise InvalidInput(f"Seed and stream index must be nonnegative, got {seed}, {index}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def block_ranges(total: int, block_size: int = BLOCK_SIZE) -> list[range]:
    return [range(start, min(start + block_size, total)) for start in range(0, total, block_size)]


def run_blocks(
    func: Callable[[range], T],
    total: int,
    workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> list[T]:
    """
    Apply `func` to consecutive index blocks covering `range(total)` and return the
    results in block order. With `workers > 1` blocks run on a thread pool.
    """
    return map_ordered(func, block_ranges(total, block_size), workers)


def map_ordered(func: Callable[[U], T], items: Iterable[U], workers: int = 1) -> list[T]:
    """
    `[func(item) for item in items]`, optionally on a thread pool; order is preserved.
    """
    return list(imap_ordered(func, items, workers))


def imap_ordered(
    func: Callable[[U], T], items: Iterable[U], workers: int = 1, window: int | None = None
) -> Generator[T, None, None]:
    """
    Lazily yield `func(item)` in item order. With `workers > 1` at most `window` items
    (default twice the workers) are in flight, and closing the iterator early leaves
    the rest of `items` unread.
    """
    if workers <= 1:
        for item in items:
            yield func(item)
        return
    window = window or 2 * workers
    iterator = iter(items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque(pool.submit(func, item) for item in islice(iterator, window))
        try:
            while pending:
                result = pending.popleft().result()
                pending.extend(pool.submit(func, item) for item in islice(iterator, 1))
                yield result
        finally:
            for future in pending:
                future.cancel()
