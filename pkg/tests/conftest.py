import numpy as np
import pytest

from evocast.graph import AdjacencyIndex


def adjacency_from_edges(n, edges, relations=None, counts=None):
    """Build a symmetric CSR index straight from an undirected edge list."""
    m = len(edges)
    relations = relations if relations is not None else [0] * m
    counts = counts if counts is not None else [1] * m
    rows, cols, rels, cnts = [], [], [], []
    for (a, b), r, c in zip(edges, relations, counts):
        rows += [a, b]
        cols += [b, a]
        rels += [r, r]
        cnts += [c, c]
    rows = np.array(rows, dtype=np.int64)
    cols = np.array(cols, dtype=np.int64)
    rels = np.array(rels, dtype=np.int64)
    cnts = np.array(cnts, dtype=np.int64)
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return AdjacencyIndex(indptr, cols[order], rels[order], cnts[order])


def random_connected_graph(rng, n, extra_edges=0):
    """Random tree on n nodes plus optional extra edges; always connected."""
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.add((u, v))
    for _ in range(extra_edges):
        a, b = rng.integers(0, n, size=2)
        a, b = int(min(a, b)), int(max(a, b))
        if a != b:
            edges.add((a, b))
    return sorted(edges)


def exact_ppr(adj, seed, alpha, tol=1e-10, max_iter=100_000):
    """Dense power-iteration oracle for the teleporting-walk distribution."""
    n = adj.n
    walk = np.zeros((n, n))
    for u in range(n):
        deg = adj.degree(u)
        if deg:
            walk[u, adj.neighbors(u)] = 1.0 / deg
    pi = np.zeros(n)
    pi[seed] = 1.0
    e = np.zeros(n)
    e[seed] = alpha
    for _ in range(max_iter):
        nxt = e + (1.0 - alpha) * pi @ walk
        if np.abs(nxt - pi).max() < tol:
            return nxt
        pi = nxt
    raise AssertionError("power iteration did not converge")


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
