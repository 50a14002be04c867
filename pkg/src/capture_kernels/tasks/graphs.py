"""Random geometric graphs with shortest-path and min-cut oracles."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import RadiusOverflow, TooShort
from .base import TaskInstance

DEFAULT_ALPHA = 4.5


@dataclass
class GeoGraph:
    points: np.ndarray
    radius: float
    adjacency: np.ndarray  # symmetric bool, no self loops
    directed: np.ndarray | None = None  # bool, directed[u, v]: edge u -> v
    source: int = 0
    target: int = -1

    def __post_init__(self):
        if self.target < 0:
            self.target = len(self.points) + self.target

    @property
    def T(self):
        return len(self.points)


def ball_volume(r, dim):
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * r ** dim


def radius_for_degree(T, alpha, dim=2):
    """Radius with expected degree ``alpha`` for uniform points in ``[-1, 1]^dim``.

    Solves ``alpha = (T - 1) vol(B_r) / 2^dim`` (boundary effects ignored).
    """
    if T < 2:
        raise TooShort("need T >= 2")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    unit = ball_volume(1.0, dim)
    r = (alpha * 2 ** dim / ((T - 1) * unit)) ** (1.0 / dim)
    if r > 2 * math.sqrt(dim):
        raise RadiusOverflow(f"radius {r:.3f} exceeds the box diameter; alpha unattainable")
    return r


def geometric_adjacency(points, r):
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    adj = d2 <= r * r
    np.fill_diagonal(adj, False)
    return adj


def orient_for_flow(adj, source, target):
    """Source edges leave the source, target edges enter the target, relays go both ways."""
    d = adj.copy()
    d[:, source] = False
    d[target, :] = False
    return d


def gen_rgg(T, rng, alpha=DEFAULT_ALPHA, dim=2, directed_for_mincut=False, radius=None) -> GeoGraph:
    r = radius_for_degree(T, alpha, dim) if radius is None else float(radius)
    pts = rng.uniform(-1.0, 1.0, size=(T, dim))
    adj = geometric_adjacency(pts, r)
    g = GeoGraph(pts, r, adj, None, 0, T - 1)
    if directed_for_mincut:
        g.directed = orient_for_flow(adj, g.source, g.target)
    return g


def graph_from_points(points, radius, directed=False):
    pts = np.asarray(points, dtype=np.float64)
    adj = geometric_adjacency(pts, radius)
    g = GeoGraph(pts, float(radius), adj, None, 0, len(pts) - 1)
    if directed:
        g.directed = orient_for_flow(adj, g.source, g.target)
    return g


def spp_oracle(g: GeoGraph):
    """BFS hop distance from source to target; ``math.inf`` if unreachable."""
    dist = np.full(g.T, -1)
    dist[g.source] = 0
    queue = deque([g.source])
    nbrs = [np.flatnonzero(row) for row in g.adjacency]
    while queue:
        u = queue.popleft()
        if u == g.target:
            return int(dist[u])
        for v in nbrs[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return math.inf


def spp_label(distance, T, mode="regression"):
    """Encode a BFS distance; unreachable maps to ``2T`` (regression) or class ``T``."""
    if mode not in ("regression", "classification"):
        raise ValueError("mode must be 'regression' or 'classification'")
    if math.isinf(distance):
        return 2 * T if mode == "regression" else T
    return int(distance)


class Dinic:
    """Blocking-flow max-flow on an integer capacity matrix."""

    def __init__(self, cap):
        self.cap = np.array(cap, dtype=np.int64)
        self.n = len(self.cap)
        self.adj = [list(np.flatnonzero((self.cap[u] > 0) | (self.cap[:, u] > 0)))
                    for u in range(self.n)]

    def _levels(self, s, t, res):
        level = [-1] * self.n
        level[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in self.adj[u]:
                if level[v] < 0 and res[u, v] > 0:
                    level[v] = level[u] + 1
                    q.append(v)
        return level if level[t] >= 0 else None

    def max_flow(self, s, t):
        if s == t:
            raise ValueError("source equals target")
        res = self.cap.copy()
        flow = 0
        while True:
            level = self._levels(s, t, res)
            if level is None:
                return flow, res
            ptr = [0] * self.n

            def push(u, f):
                if u == t:
                    return f
                while ptr[u] < len(self.adj[u]):
                    v = self.adj[u][ptr[u]]
                    if res[u, v] > 0 and level[v] == level[u] + 1:
                        got = push(v, min(f, res[u, v]))
                        if got:
                            res[u, v] -= got
                            res[v, u] += got
                            return got
                    ptr[u] += 1
                return 0

            while True:
                f = push(s, np.iinfo(np.int64).max)
                if not f:
                    break
                flow += int(f)


def mincut_oracle(g: GeoGraph) -> int:
    """Max-flow value (= min cut capacity) with unit capacities on directed edges."""
    d = g.directed if g.directed is not None else orient_for_flow(g.adjacency, g.source, g.target)
    flow, _ = Dinic(d.astype(np.int64)).max_flow(g.source, g.target)
    return int(flow)


def min_cut_set(g: GeoGraph):
    """Source side of a minimum cut (nodes reachable in the final residual graph)."""
    d = g.directed if g.directed is not None else orient_for_flow(g.adjacency, g.source, g.target)
    _, res = Dinic(d.astype(np.int64)).max_flow(g.source, g.target)
    seen = {g.source}
    q = deque([g.source])
    while q:
        u = q.popleft()
        for v in np.flatnonzero(res[u] > 0):
            if v not in seen:
                seen.add(int(v))
                q.append(int(v))
    return sorted(seen)


def gen_spp(T, rng, alpha=DEFAULT_ALPHA, dim=2, label_mode="regression") -> TaskInstance:
    g = gen_rgg(T, rng, alpha, dim)
    payload = {"points": g.points.tolist(), "radius": g.radius, "label_mode": label_mode}
    return TaskInstance("spp", T, payload, spp_label(spp_oracle(g), T, label_mode), meta={"graph": g})


def gen_mincut(T, rng, alpha=DEFAULT_ALPHA, dim=2) -> TaskInstance:
    g = gen_rgg(T, rng, alpha, dim, directed_for_mincut=True)
    payload = {"points": g.points.tolist(), "radius": g.radius}
    return TaskInstance("mincut", T, payload, mincut_oracle(g), meta={"graph": g})
