"""Per-superpoint predictions: from files written by an external model, or from
a ground-truth oracle with controllable noise.

Text prediction file::

    V d
    x_1 ... x_d  class  o_x o_y o_z  u  r      (one row per superpoint)

The binary twin starts with magic ``SPP1``, ``u32 V``, ``u32 d`` and then
per row ``d`` f64 embeddings, ``i32`` class, three f64 offsets, f64 ``u`` and
f64 ``r`` (little endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError, ValidationError
from .pcio import DEFAULT_VOXEL_SIZE, voxel_count

DEFAULT_EMBEDDING_DIM = 16
BINARY_MAGIC = b"SPP1"

# floor applied to oracle radii / voxel counts so bundles stay strictly positive
_MIN_POSITIVE = 1e-6


@dataclass
class PredictionBundle:
    embeddings: np.ndarray
    semantics: np.ndarray
    offsets: np.ndarray
    voxel_pred: np.ndarray
    radius_pred: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValidationError("embeddings must be a |V| x d matrix")
        n = len(self.embeddings)
        self.semantics = np.asarray(self.semantics, dtype=np.int64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.voxel_pred = np.asarray(self.voxel_pred, dtype=np.float64).reshape(-1)
        self.radius_pred = np.asarray(self.radius_pred, dtype=np.float64).reshape(-1)
        for name in ("semantics", "offsets", "voxel_pred", "radius_pred"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        for name in ("embeddings", "offsets", "voxel_pred", "radius_pred"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                row = int(np.flatnonzero(~np.isfinite(arr.reshape(n, -1)).all(axis=1))[0])
                raise ValidationError(f"{name} row {row} is not finite")
        for name in ("voxel_pred", "radius_pred"):
            bad = np.flatnonzero(getattr(self, name) <= 0)
            if len(bad):
                raise ValidationError(f"{name} row {int(bad[0])} is not positive")

    def __len__(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def save(self, path, binary=None):
        path = Path(path)
        if binary is None:
            binary = path.suffix == ".spp"
        if binary:
            parts = [BINARY_MAGIC, struct.pack("<II", len(self), self.dim)]
            row = np.dtype([("x", "<f8", (self.dim,)), ("s", "<i4"), ("o", "<f8", (3,)), ("u", "<f8"), ("r", "<f8")])
            rec = np.empty(len(self), dtype=row)
            rec["x"], rec["s"], rec["o"] = self.embeddings, self.semantics, self.offsets
            rec["u"], rec["r"] = self.voxel_pred, self.radius_pred
            parts.append(rec.tobytes())
            path.write_bytes(b"".join(parts))
            return
        lines = [f"{len(self)} {self.dim}"]
        for i in range(len(self)):
            vals = [repr(float(v)) for v in self.embeddings[i]]
            vals.append(str(int(self.semantics[i])))
            vals += [repr(float(v)) for v in self.offsets[i]]
            vals += [repr(float(self.voxel_pred[i])), repr(float(self.radius_pred[i]))]
            lines.append(" ".join(vals))
        path.write_text("\n".join(lines) + "\n")


@dataclass
class NoiseSpec:
    semantic_flip_prob: float = 0.0
    offset_sigma: float = 0.0
    volume_rel_sigma: float = 0.0
    embedding_cluster_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.semantic_flip_prob <= 1.0:
            raise ValidationError("semantic_flip_prob must be in [0, 1]")
        for name in ("offset_sigma", "volume_rel_sigma", "embedding_cluster_sigma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


def instance_radius(positions):
    """Distance from the centroid of ``positions`` to the farthest of them."""
    positions = np.asarray(positions, dtype=np.float64)
    return float(np.linalg.norm(positions - positions.mean(axis=0), axis=1).max())


def _majority(values, members):
    out = np.empty(len(members), dtype=np.int64)
    for s, m in enumerate(members):
        ids, counts = np.unique(values[m], return_counts=True)
        out[s] = ids[np.argmax(counts)]  # ties -> smallest id
    return out


def oracle_predictions(cloud, sp, noise: NoiseSpec | None = None, voxel_size=DEFAULT_VOXEL_SIZE,
                       dim=DEFAULT_EMBEDDING_DIM) -> PredictionBundle:
    """Predictions derived from ground truth, perturbed according to ``noise``."""
    noise = noise or NoiseSpec()
    if not cloud.has_ground_truth:
        raise DomainError("oracle predictions need gt_semantic and gt_instance")
    rng = np.random.default_rng(noise.rng_seed)
    V = sp.num_superpoints
    sp_inst = _majority(cloud.gt_instance, sp.member_lists)
    sp_sem = _majority(cloud.gt_semantic, sp.member_lists)

    groups = np.unique(sp_inst)
    centre, count, radius, anchor = {}, {}, {}, {}
    for g in groups:
        pts = cloud.positions[cloud.gt_instance == g]
        centre[g] = pts.mean(axis=0)
        count[g] = float(voxel_count(pts, voxel_size))
        radius[g] = max(instance_radius(pts), _MIN_POSITIVE)
        a = rng.normal(size=dim)
        anchor[g] = a / np.linalg.norm(a)

    semantics = sp_sem.copy()
    if noise.semantic_flip_prob > 0:
        classes = np.unique(cloud.gt_semantic)
        flip = rng.random(V) < noise.semantic_flip_prob
        if len(classes) > 1:
            for s in np.flatnonzero(flip):
                others = classes[classes != semantics[s]]
                semantics[s] = others[rng.integers(len(others))]

    offsets = np.stack([centre[g] for g in sp_inst]) - sp.centroids
    if noise.offset_sigma > 0:
        offsets = offsets + rng.normal(scale=noise.offset_sigma, size=offsets.shape)

    u = np.array([count[g] for g in sp_inst])
    r = np.array([radius[g] for g in sp_inst])
    if noise.volume_rel_sigma > 0:
        u = u * (1 + rng.normal(scale=noise.volume_rel_sigma, size=V))
        r = r * (1 + rng.normal(scale=noise.volume_rel_sigma, size=V))
    u = np.maximum(u, _MIN_POSITIVE)
    r = np.maximum(r, _MIN_POSITIVE)

    X = np.stack([anchor[g] for g in sp_inst])
    if noise.embedding_cluster_sigma > 0:
        X = X + rng.normal(scale=noise.embedding_cluster_sigma, size=X.shape)
    return PredictionBundle(X, semantics, offsets, u, r)


def load_predictions(path, expected_V=None) -> PredictionBundle:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == BINARY_MAGIC:
        bundle = _load_binary(path, raw)
    else:
        bundle = _load_text(path, raw.decode())
    if expected_V is not None and len(bundle) != expected_V:
        raise ValidationError(f"{path}: {len(bundle)} prediction rows, expected {expected_V}")
    return bundle


def _load_text(path, text):
    lines = [(n, l) for n, l in enumerate(text.splitlines(), start=1) if l.strip()]
    if not lines:
        raise ParseError("empty prediction file", path, 1)
    try:
        V, d = (int(v) for v in lines[0][1].split())
    except ValueError:
        raise ParseError("header must be 'V d'", path, lines[0][0]) from None
    if len(lines) - 1 != V:
        raise ValidationError(f"{path}: header declares {V} rows, found {len(lines) - 1}")
    X = np.empty((V, d))
    s = np.empty(V, dtype=np.int64)
    o = np.empty((V, 3))
    u = np.empty(V)
    r = np.empty(V)
    for row, (lineno, line) in enumerate(lines[1:]):
        tok = line.split()
        if len(tok) != d + 6:
            raise ParseError(f"expected {d + 6} values, got {len(tok)}", path, lineno)
        try:
            X[row] = [float(t) for t in tok[:d]]
            s[row] = int(tok[d])
            o[row] = [float(t) for t in tok[d + 1:d + 4]]
            u[row], r[row] = float(tok[d + 4]), float(tok[d + 5])
        except ValueError:
            raise ParseError("non-numeric value", path, lineno) from None
    return PredictionBundle(X, s, o, u, r)


def _load_binary(path, raw):
    if len(raw) < 12:
        raise ParseError("truncated header", path, offset=4)
    V, d = struct.unpack_from("<II", raw, 4)
    row = np.dtype([("x", "<f8", (d,)), ("s", "<i4"), ("o", "<f8", (3,)), ("u", "<f8"), ("r", "<f8")])
    if len(raw) != 12 + V * row.itemsize:
        raise ParseError(f"expected {12 + V * row.itemsize} bytes, found {len(raw)}", path, offset=12)
    rec = np.frombuffer(raw, dtype=row, count=V, offset=12)
    return PredictionBundle(rec["x"].reshape(V, d), rec["s"], rec["o"], rec["u"], rec["r"])
