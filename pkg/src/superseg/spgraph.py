"""k-nearest-neighbor superpoint graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_K = 5


@dataclass
class SuperpointGraph:
    num_nodes: int
    neighbor_lists: list  # sorted int arrays
    adjacency: sp.csr_matrix

    @property
    def edge_count(self):
        return int(self.adjacency.nnz // 2)

    @classmethod
    def from_edges(cls, num_nodes, edges):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
            raise ValidationError("edge endpoint out of range")
        if (edges[:, 0] == edges[:, 1]).any():
            raise ValidationError("self-loop in edge list")
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        M = sp.coo_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(num_nodes, num_nodes)).tocsr()
        M.sum_duplicates()
        M.sort_indices()
        nbrs = [M.indices[M.indptr[i]:M.indptr[i + 1]].copy() for i in range(num_nodes)]
        return cls(num_nodes, nbrs, M)

    def edges(self):
        """Undirected edges as an ``(E, 2)`` array with ``i < j``, sorted."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        e = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return e[np.lexsort((e[:, 1], e[:, 0]))]

    def save_edges(self, path):
        Path(path).write_text("".join(f"{i} {j}\n" for i, j in self.edges()))


def load_edges(path, num_nodes) -> SuperpointGraph:
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            i, j = (int(v) for v in line.split())
        except ValueError:
            raise ParseError("expected two integers", path, lineno) from None
        edges.append((i, j))
    return SuperpointGraph.from_edges(num_nodes, edges)


def knn(centroids, k):
    """Exact k nearest neighbors of every node, ties broken by lower node id."""
    pts = np.asarray(centroids, dtype=np.float64)
    n = len(pts)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=min(k + 1, n))
    idx = np.atleast_2d(idx).reshape(n, -1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand = idx[i][idx[i] != i]
        kth = np.linalg.norm(pts[cand] - pts[i], axis=1).max()
        # every node at distance <= kth distance competes for the last slots
        ball = np.array(tree.query_ball_point(pts[i], kth * (1 + 1e-9) + 1e-12), dtype=np.int64)
        ball = ball[ball != i]
        d = np.linalg.norm(pts[ball] - pts[i], axis=1)
        order = np.lexsort((ball, d))
        out[i] = ball[order[:k]]
    return out


def build_graph(centroids, k=DEFAULT_K) -> SuperpointGraph:
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    n = len(centroids)
    if n < 1:
        raise ValidationError("graph needs at least one node")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k >= n:
        if n > 1:
            log.warning("k=%d >= |V|=%d; clamping to %d", k, n, n - 1)
        k = n - 1
    if k == 0:
        return SuperpointGraph.from_edges(n, np.zeros((0, 2)))
    nn = knn(centroids, k)
    edges = np.stack([np.repeat(np.arange(n), k), nn.ravel()], axis=1)
    return SuperpointGraph.from_edges(n, edges)
