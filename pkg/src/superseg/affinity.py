"""Inter-superpoint affinity and affinity-weighted embedding updates.

For an edge ``(i, j)`` the logit is the dot product of the projected
embeddings ``phi @ X[i]`` and ``psi @ X[j]`` multiplied by a small perceptron
``gamma`` of the centroid displacement ``p[i] - p[j]``. Each row is a softmax
over the neighbors of ``i``.

Params file layout (whitespace separated)::

    d h
    phi   (d rows of d values)
    psi   (d rows)
    rho   (d rows)
    W1    (h rows of 3 values)
    b1    (1 row of h values)
    w2    (1 row of h values)
    b2    (1 value)
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError

DEFAULT_HIDDEN = 8


@dataclass
class AffinityParams:
    phi: np.ndarray
    psi: np.ndarray
    rho: np.ndarray
    w1: np.ndarray  # (h, 3)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float

    def __post_init__(self):
        self.phi, self.psi, self.rho = (np.asarray(m, dtype=np.float64) for m in (self.phi, self.psi, self.rho))
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        self.b2 = float(self.b2)
        d = self.phi.shape[0]
        for name in ("phi", "psi", "rho"):
            if getattr(self, name).shape != (d, d):
                raise ValidationError(f"{name} must be {d}x{d}")
        h = self.w1.shape[0]
        if self.w1.shape != (h, 3) or self.b1.shape != (h,) or self.w2.shape != (h,):
            raise ValidationError("gamma weights must be W1 (h,3), b1 (h,), w2 (h,)")
        for name in ("phi", "psi", "rho", "w1", "b1", "w2"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} contains non-finite values")
        if not np.isfinite(self.b2):
            raise ValidationError("b2 is not finite")

    @property
    def dim(self):
        return self.phi.shape[0]

    @property
    def hidden(self):
        return self.w1.shape[0]

    @classmethod
    def default(cls, d, hidden=DEFAULT_HIDDEN, seed=0):
        """Identity projections; gamma has small seeded weights and output near 1."""
        rng = np.random.default_rng(seed)
        eye = np.eye(d)
        return cls(eye, eye.copy(), eye.copy(), rng.normal(scale=0.1, size=(hidden, 3)),
                   np.zeros(hidden), rng.normal(scale=0.1, size=hidden), 1.0)

    def gamma(self, disp):
        """Perceptron R^3 -> R^h -> R with ReLU hidden layer, applied row-wise."""
        hid = np.maximum(np.asarray(disp, dtype=np.float64) @ self.w1.T + self.b1, 0.0)
        return hid @ self.w2 + self.b2

    def save(self, path):
        fmt = lambda row: " ".join(repr(float(v)) for v in row)
        lines = [f"{self.dim} {self.hidden}"]
        for m in (self.phi, self.psi, self.rho, self.w1):
            lines += [fmt(r) for r in m]
        lines += [fmt(self.b1), fmt(self.w2), repr(self.b2)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        rows = [l.split() for l in Path(path).read_text().splitlines() if l.strip()]
        try:
            d, h = (int(v) for v in rows[0])
            vals = [[float(v) for v in r] for r in rows[1:]]
        except (IndexError, ValueError):
            raise ParseError("malformed affinity params file", path) from None
        if len(vals) != 3 * d + h + 3:
            raise ParseError(f"expected {3 * d + h + 3} rows after header, found {len(vals)}", path)
        phi, psi, rho = (np.array(vals[k * d:(k + 1) * d]) for k in range(3))
        w1 = np.array(vals[3 * d:3 * d + h])
        b1, w2, b2 = vals[3 * d + h], vals[3 * d + h + 1], vals[3 * d + h + 2]
        if len(b2) != 1:
            raise ParseError("b2 must be a single value", path)
        return cls(phi, psi, rho, w1, b1, w2, b2[0])


def edge_logits(X, graph, centroids, params):
    """COO rows, cols and logits for every directed edge of ``graph``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.num_nodes:
        raise ValidationError(f"X must have {graph.num_nodes} rows")
    if X.shape[1] != params.dim:
        raise ValidationError(f"embedding dim {X.shape[1]} does not match params dim {params.dim}")
    centroids = np.asarray(centroids, dtype=np.float64)
    M = graph.adjacency.tocsr()
    rows = np.repeat(np.arange(graph.num_nodes), np.diff(M.indptr))
    cols = M.indices.astype(np.int64)
    q = X @ params.phi.T
    k = X @ params.psi.T
    sim = np.einsum("ij,ij->i", q[rows], k[cols])
    return rows, cols, sim * params.gamma(centroids[rows] - centroids[cols])


def row_softmax(rows, logits, n):
    """Softmax of ``logits`` grouped by ``rows`` (sorted), with per-row max subtraction."""
    if len(logits) == 0:
        return np.zeros(0)
    row_max = np.full(n, -np.inf)
    np.maximum.at(row_max, rows, logits)
    e = np.exp(logits - row_max[rows])
    denom = np.bincount(rows, weights=e, minlength=n)
    return e / denom[rows]


def compute_affinity(X, graph, centroids, params: AffinityParams) -> sp.csr_matrix:
    """Row-stochastic affinity matrix supported on the graph's edges."""
    rows, cols, logits = edge_logits(X, graph, centroids, params)
    vals = row_softmax(rows, logits, graph.num_nodes)
    n = graph.num_nodes
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A.sort_indices()
    return A


def update_embeddings(X, A, params: AffinityParams):
    """``X_new[i] = sum_j A[i, j] * (rho @ X[j]) + X[i]`` over the neighbors of ``i``."""
    X = np.asarray(X, dtype=np.float64)
    if A.shape != (len(X), len(X)):
        raise ValidationError(f"A has shape {A.shape}, expected {(len(X), len(X))}")
    if X.shape[1] != params.dim:
        raise ValidationError(f"embedding dim {X.shape[1]} does not match params dim {params.dim}")
    return A @ (X @ params.rho.T) + X
