"""Monte Carlo summaries with batch-mean standard errors."""
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

N_BATCHES = 10


def mean_se(samples, n_batches=N_BATCHES):
    """Mean and batch-means standard error of per-trajectory samples.

    Batches are contiguous blocks of trajectories, so the result depends
    only on the trajectory order.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = len(x)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(x) / n
    nb = min(n_batches, n)
    if nb < 2:
        return mean, math.inf
    edges = np.linspace(0, n, nb + 1).astype(int)
    bm = np.array([math.fsum(x[a:b]) / (b - a) for a, b in zip(edges[:-1], edges[1:])])
    se = float(np.std(bm, ddof=1) / math.sqrt(nb))
    return mean, se


def chunk_bounds(n, workers):
    """Contiguous [a, b) chunks covering range(n)."""
    workers = max(1, min(int(workers), n)) if n else 1
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_chunks(fn, n, workers=1):
    """Call fn(a, b) on contiguous chunks, threaded when workers > 1."""
    bounds = chunk_bounds(n, workers)
    if len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=len(bounds)) as ex:
        return list(ex.map(lambda ab: fn(*ab), bounds))
