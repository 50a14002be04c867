"""Shared test helpers."""
import math

import numpy as np


def random_psd(rng, t, rank=None):
    a = rng.standard_normal((t, rank or t + 2))
    return a @ a.T / a.shape[1]


def random_triple(rng, t, d=5):
    x = rng.standard_normal((2 * t, d))
    c = x @ x.T / d
    return c[:t, :t], c[:t, t:], c[t:, t:]


def zscore(emp, target, se):
    se = np.asarray(se, dtype=float)
    gap = np.abs(np.asarray(emp) - np.asarray(target))
    return np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 0, np.inf, 0.0))


def floyd_warshall(adj):
    n = len(adj)
    d = np.where(adj, 1.0, np.inf)
    np.fill_diagonal(d, 0.0)
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    return d


def brute_force_cut(d, s, t):
    n = len(d)
    relays = [v for v in range(n) if v not in (s, t)]
    best = math.inf
    for mask in range(2 ** len(relays)):
        side = {s} | {v for i, v in enumerate(relays) if mask >> i & 1}
        cut = sum(int(d[u, v]) for u in side for v in range(n) if v not in side)
        best = min(best, cut)
    return best
