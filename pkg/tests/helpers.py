"""Shared oracles for the test suite."""
import numpy as np


def random_adjacency(rng, n, p=0.4):
    a = np.triu((rng.random((n, n)) < p).astype(np.uint8), k=1)
    return a + a.T


def central_diff(f, arr, index, step=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. ``arr[index]`` (in place, restored)."""
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2 * step)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def pairwise_bce_min(targets, weights):
    """Minimum expected BCE of a free per-context predictor: the conditional entropy."""
    p = np.clip(targets, 1e-300, 1.0)
    q = np.clip(1.0 - targets, 1e-300, 1.0)
    h = -(targets * np.log(p) + (1 - targets) * np.log(q))
    return float(np.sum(weights * h))
