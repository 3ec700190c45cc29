"""
This module provides the worker pool for per-series updates. Series are
independent within a sweep step, so they can run on threads. The number
of threads comes from ``FMSV_THREADS`` (default 1, i.e. sequential).
"""

import os
import atexit
from concurrent.futures import ThreadPoolExecutor


_pools = {}


def get_thread_count():
    """Get the thread count from the ``FMSV_THREADS`` environment variable."""
    text = os.environ.get("FMSV_THREADS", "").strip()
    if not text:
        return 1
    try:
        n = int(text)
    except ValueError:
        raise ValueError(f"FMSV_THREADS must be an integer, not {text!r}") from None
    if n < 1:
        raise ValueError(f"FMSV_THREADS must be >= 1, not {n}")
    return n


def map_series(func, args_list, threads=None):
    """Call ``func(*args)`` for each args tuple and return the results in
    order. Runs on a thread pool when ``threads`` (default from the
    environment) is larger than one.
    """
    args_list = list(args_list)
    threads = get_thread_count() if threads is None else threads
    if threads <= 1 or len(args_list) <= 1:
        return [func(*args) for args in args_list]
    pool = _pools.get(threads)
    if pool is None:
        pool = _pools[threads] = ThreadPoolExecutor(
            threads, thread_name_prefix="fmsv"
        )
    return list(pool.map(lambda args: func(*args), args_list))


def shutdown():
    """Shut down the worker pools. Runs at exit; a later ``map_series()``
    starts new ones.
    """
    while _pools:
        _, pool = _pools.popitem()
        pool.shutdown(wait=True)


atexit.register(shutdown)
