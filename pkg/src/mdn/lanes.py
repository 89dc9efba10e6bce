"""Layout helpers and the lane worker pool.

A lane is one independent (batch, head) stream. Kernels work on lane-major
arrays ``[N, T, ...]`` with ``N = B * H``; the public API speaks ``[B, T, H, ...]``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-linux
        return os.cpu_count() or 1


def to_lanes(x: np.ndarray) -> np.ndarray:
    """``[B, T, H, *rest] -> [B*H, T, *rest]``."""
    B, T, H = x.shape[:3]
    return np.ascontiguousarray(np.moveaxis(x, 2, 1)).reshape(B * H, T, *x.shape[3:])


def from_lanes(x: np.ndarray, B: int, H: int) -> np.ndarray:
    """Inverse of :func:`to_lanes`."""
    T = x.shape[1]
    return np.ascontiguousarray(np.moveaxis(x.reshape(B, H, T, *x.shape[2:]), 1, 2))


def map_lanes(fn, arrays, workers: int = 1):
    """Run ``fn(*arrays)`` over contiguous lane groups, one group per worker.

    ``arrays`` all share the leading lane axis (``None`` entries are passed
    through). ``fn`` must return a tuple of arrays with the same leading axis;
    results are concatenated back in lane order.
    """
    n = next(a.shape[0] for a in arrays if a is not None)
    workers = max(1, min(int(workers), n))
    if workers == 1:
        return fn(*arrays)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    parts = [tuple(None if a is None else a[lo:hi] for a in arrays)
             for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda args: fn(*args), parts))
    return tuple(np.concatenate(chunk, axis=0) for chunk in zip(*results))
