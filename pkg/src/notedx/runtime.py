"""Process-wide numeric settings."""

import os
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

WORKERS_ENV = "NOTEDX_WORKERS"


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        return default
    return max(1, n)


@contextmanager
def numeric_mode(deterministic: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if deterministic:
        with threadpool_limits(limits=1):
            yield
    else:
        yield
