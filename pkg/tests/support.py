"""Shared independent oracles for the test suite.

Everything here is deliberately written against the *documented* behaviour
of the package, using different algorithms and data structures than the
implementations under test, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import itertools

import networkx as nx
import numpy as np


def nash_by_support_enumeration(matrix: np.ndarray, tol: float = 1e-9):
    """Equilibrium of a zero-sum matrix game by support enumeration.

    The row player maximises.  Enumerates equal-size supports, solves the
    indifference systems directly, and keeps the first support pair whose
    solution is a feasible equilibrium (non-negative weights, no profitable
    deviation outside the support).  Returns ``(x, y, value)``.
    """
    u = np.asarray(matrix, dtype=np.float64)
    n_rows, n_cols = u.shape
    for size in range(1, min(n_rows, n_cols) + 1):
        for rows in itertools.combinations(range(n_rows), size):
            for cols in itertools.combinations(range(n_cols), size):
                sol = _solve_support(u, list(rows), list(cols), tol)
                if sol is not None:
                    return sol
    raise RuntimeError("support enumeration found no equilibrium")


def _solve_support(u, rows, cols, tol):
    k = len(rows)
    sub = u[np.ix_(rows, cols)]
    # x on `rows` makes every column in `cols` pay the same value v.
    a = np.zeros((k + 1, k + 1))
    a[:k, :k] = sub.T
    a[:k, k] = -1.0
    a[k, :k] = 1.0
    b = np.zeros(k + 1)
    b[k] = 1.0
    try:
        x_v = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return None
    # y on `cols` makes every row in `rows` pay the same value v.
    a2 = np.zeros((k + 1, k + 1))
    a2[:k, :k] = sub
    a2[:k, k] = -1.0
    a2[k, :k] = 1.0
    try:
        y_v = np.linalg.solve(a2, b)
    except np.linalg.LinAlgError:
        return None
    x_s, v1 = x_v[:k], x_v[k]
    y_s, v2 = y_v[:k], y_v[k]
    if abs(v1 - v2) > 1e-7:
        return None
    if x_s.min() < -tol or y_s.min() < -tol:
        return None
    value = 0.5 * (v1 + v2)
    x = np.zeros(u.shape[0])
    y = np.zeros(u.shape[1])
    x[rows] = np.clip(x_s, 0.0, None)
    y[cols] = np.clip(y_s, 0.0, None)
    x /= x.sum()
    y /= y.sum()
    # No row outside the support may beat v against y, and no column
    # outside the support may pay the row player less than v against x.
    if np.max(u @ y) > value + 1e-7:
        return None
    if np.min(x @ u) < value - 1e-7:
        return None
    return x, y, value


def khop_zone_oracle(changed, adjacency, radius):
    """Nodes within ``radius`` hops of any changed node, via networkx
    shortest path lengths on an explicitly rebuilt graph."""
    g = nx.Graph()
    g.add_nodes_from(range(len(adjacency)))
    for node, nbrs in enumerate(adjacency):
        for nbr in nbrs:
            g.add_edge(node, nbr)
    zone = set()
    for node in changed:
        lengths = nx.single_source_shortest_path_length(g, int(node),
                                                        cutoff=radius)
        zone.update(lengths.keys())
    return zone


class ReferenceCache:
    """Reference model of the bounded-staleness LRU cache.

    Implements the documented laws directly on a list kept in
    least-recently-used order (front = coldest).  When ``reeval_prob`` is
    positive the model consumes its own ``numpy`` generator exactly once
    per present-and-fresh lookup, mirroring when the implementation draws,
    so a same-seeded run reproduces the audit decisions too.
    """

    def __init__(self, capacity, ttl=None, flush_interval=None,
                 reeval_prob=0.0, seed=0):
        self.capacity = capacity
        self.ttl = ttl
        self.flush_interval = flush_interval
        self.reeval_prob = reeval_prob
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.order = []          # keys, coldest first
        self.values = {}         # key -> (q, inserted_at)

    def lookup(self, key):
        if key not in self.values:
            return None
        q, inserted_at = self.values[key]
        if self.ttl is not None and self.step - inserted_at > self.ttl:
            self._drop(key)
            return None
        if self.reeval_prob > 0.0 and self.rng.random() < self.reeval_prob:
            self._drop(key)
            return None
        self.order.remove(key)
        self.order.append(key)
        return q

    def insert(self, key, q):
        if key in self.values:
            self._drop(key)
        self.values[key] = (float(q), self.step)
        self.order.append(key)
        while len(self.order) > self.capacity:
            self._drop(self.order[0])

    def tick(self):
        self.step += 1
        if self.flush_interval is not None and self.step % self.flush_interval == 0:
            self.order.clear()
            self.values.clear()

    def invalidate(self, changed, adjacency, radius):
        zone = khop_zone_oracle(changed, adjacency, radius) if changed else set()
        for key in [k for k in self.order if k.node in zone]:
            self._drop(key)

    def keys(self):
        return list(self.order)

    def _drop(self, key):
        self.order.remove(key)
        del self.values[key]


def mlp_forward_oracle(net, x):
    """Recompute an MLP forward pass with per-sample, per-unit loops."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    outs = []
    for sample in batch:
        a = sample.astype(np.float64)
        for idx, (w, b) in enumerate(zip(net.weights, net.biases)):
            z = np.array([np.dot(w[j], a) + b[j] for j in range(w.shape[0])])
            name = (net.activation if idx < len(net.weights) - 1
                    else net.output_activation)
            if name == "relu":
                a = np.maximum(z, 0.0)
            elif name == "tanh":
                a = np.tanh(z)
            elif name == "sigmoid":
                a = 1.0 / (1.0 + np.exp(-z))
            else:
                a = z
        outs.append(a)
    out = np.stack(outs)
    return out[0] if single else out
