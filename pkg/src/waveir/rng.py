"""Named random sub-streams derived from one user seed.

Every random draw in the package goes through :func:`stream`, so a run
is reproducible from its seed alone and parallel workers never share a
generator.
"""

from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager

import numpy as np
from threadpoolctl import threadpool_limits

_local = threading.local()


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, keys)]))


@contextmanager
def single_threaded():
    """Pin BLAS to one thread so reductions run in a fixed order.

    Nested uses are free: only the outermost one touches the thread pools.
    """
    depth = getattr(_local, "depth", 0)
    if depth:
        _local.depth = depth + 1
        try:
            yield
        finally:
            _local.depth = depth
        return
    with threadpool_limits(1):
        _local.depth = 1
        try:
            yield
        finally:
            _local.depth = 0
