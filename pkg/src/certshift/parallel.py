"""Deterministic chunked parallelism.

Work is cut into fixed-size chunks by sample index; a thread pool only
changes which worker runs a chunk, never the chunk contents, so results are
identical for any thread count. BLAS pools are pinned to one thread inside
parallel regions: the GEMMs here are small enough that intra-op threading
only adds contention.
"""

from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor


def single_threaded_blas():
    """Context manager pinning BLAS to one thread (no-op if unavailable)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def thread_count(override: int | None = None) -> int:
    """Worker count: explicit override, else CERTSHIFT_THREADS, else 1."""
    if override is not None and override > 0:
        return override
    env = os.environ.get("CERTSHIFT_THREADS", "")
    try:
        n = int(env)
    except ValueError:
        return 1
    return n if n > 0 else 1


def map_chunks(fn, xs, ys, chunk: int, threads: int = 1) -> list:
    """Apply fn(start_index, xs_chunk, ys_chunk) over fixed chunks, in order."""
    starts = list(range(0, len(ys), chunk))
    if threads <= 1 or len(starts) <= 1:
        return [fn(s, xs[s : s + chunk], ys[s : s + chunk]) for s in starts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, s, xs[s : s + chunk], ys[s : s + chunk]) for s in starts]
        return [f.result() for f in futures]
