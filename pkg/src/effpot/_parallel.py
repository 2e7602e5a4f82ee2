"""Process-pool mapping with a deterministic result order."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def resolve_jobs(jobs=None) -> int:
    if jobs is None:
        env = os.environ.get("EFFPOT_JOBS")
        jobs = int(env) if env else 1
    return max(1, int(jobs))


def pmap(fn, items, jobs=None):
    """``[fn(x) for x in items]``, optionally spread over worker processes.

    Results are returned in input order, so output never depends on the
    number of workers as long as ``fn`` carries its own seed.
    """
    items = list(items)
    jobs = min(resolve_jobs(jobs), len(items)) if items else 1
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def child_rng(seed, index):
    """Generator for stream ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
