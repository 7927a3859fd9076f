"""Counter-based random streams and deterministic block-parallel execution.

Every stream is a Philox generator keyed by ``(master_seed, tag, index...)``, so a
replicate block draws the same numbers no matter which worker runs it or in
which order blocks finish.  Results are merged in block order.
"""

from __future__ import annotations

import hashlib
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

WORKERS_ENV = "MDPCHAIN_WORKERS"


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key components must be non-negative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    if isinstance(part, (bytes, bytearray)):
        return int.from_bytes(hashlib.sha256(part).digest()[:8], "little")
    raise TypeError(f"unsupported stream key component {part!r}")


def stream(master_seed: int, *key) -> np.random.Generator:
    """Independent generator for ``(master_seed, *key)``; key parts are ints, strings or bytes."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def replicate_stream(master_seed: int, replicate_id: int, tag: str = "path") -> np.random.Generator:
    return stream(master_seed, tag, replicate_id)


def point_stream(master_seed: int, point: np.ndarray, tag: str = "point") -> np.random.Generator:
    """Stream keyed by the exact bytes of a state vector."""
    return stream(master_seed, tag, np.ascontiguousarray(point, dtype=float).tobytes())


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("a random stream (Generator or integer seed) is required")
    return stream(int(rng))


def default_workers() -> int:
    value = os.environ.get(WORKERS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            pass
    return 1


def blocks(total: int, block_size: int) -> list[tuple[int, int, int]]:
    """Partition ``total`` replicates into ``(block_id, start, count)`` chunks of fixed size."""
    if total < 0 or block_size < 1:
        raise ValueError("total must be >= 0 and block_size >= 1")
    out = []
    start = 0
    block_id = 0
    while start < total:
        count = min(block_size, total - start)
        out.append((block_id, start, count))
        start += count
        block_id += 1
    return out


def run_blocks(func: Callable[..., Any], tasks: Sequence[tuple], workers: int | None = None) -> list:
    """Apply ``func(*task)`` to every task; results come back in task order.

    Output never depends on ``workers``; it only changes how tasks are scheduled.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [func(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(func, *zip(*tasks)))


def merge_counts(parts: Iterable[np.ndarray]) -> np.ndarray:
    total = None
    for p in parts:
        p = np.asarray(p, dtype=np.int64)
        total = p.copy() if total is None else total + p
    return total
