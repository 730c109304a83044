"""Oversegmentation into superpoints and lifting of point clicks to superpoints.

The partitioner is voxel-seeded region growing: two points are compatible
when their voxels are 26-adjacent (or equal), the angle between their normals
is at most ``normal_angle_max`` and their color distance is at most
``color_dist_max``. Regions are grown breadth first from the lowest-index
unvisited point. Because compatibility is symmetric a region is exactly a
connected component of the compatibility graph, so the partition does not
depend on point order. Regions larger than ``8 * target_superpoint_size``
are split by recursive median bisection along their longest extent.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import LabelConflictError, ParseError, ValidationError
from .pcio import PointCloud, voxel_indices


@dataclass
class OversegParams:
    target_superpoint_size: int = 30
    normal_angle_max: float = 45.0
    color_dist_max: float = 0.3
    grid_size: float = 0.05


@dataclass
class Superpointization:
    assignment: np.ndarray
    num_superpoints: int
    centroids: np.ndarray
    mean_features: np.ndarray
    member_lists: list

    @classmethod
    def from_assignment(cls, assignment, cloud: PointCloud):
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.shape != (len(cloud),):
            raise ValidationError(
                f"assignment has {assignment.size} entries for {len(cloud)} points"
            )
        if len(assignment) and assignment.min() < 0:
            raise ValidationError("negative superpoint id")
        nsp = int(assignment.max()) + 1 if len(assignment) else 0
        counts = np.bincount(assignment, minlength=nsp)
        if (counts == 0).any():
            raise ValidationError(f"superpoint id gap: id {int(np.flatnonzero(counts == 0)[0])} is empty")
        order = np.argsort(assignment, kind="stable")
        members = np.split(order, np.cumsum(counts)[:-1]) if nsp else []
        centroids = np.stack([cloud.positions[m].mean(axis=0) for m in members]) if nsp else np.zeros((0, 3))
        feats = [f for f in (cloud.colors, cloud.normals) if f is not None]
        if feats and nsp:
            F = np.concatenate(feats, axis=1)
            mean_features = np.stack([F[m].mean(axis=0) for m in members])
        else:
            mean_features = np.zeros((nsp, 0))
        return cls(assignment, nsp, centroids, mean_features, members)

    def save(self, path):
        Path(path).write_text("".join(f"{int(a)}\n" for a in self.assignment))

    def point_ids(self, superpoint_ids):
        ids = sorted(int(s) for s in superpoint_ids)
        if not ids:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self.member_lists[s] for s in ids]))


@dataclass
class SuperpointWeakLabels:
    instance_label: np.ndarray  # -1 = unlabeled
    semantic_label: np.ndarray  # -1 = unlabeled
    annotated_mask: np.ndarray

    def __post_init__(self):
        both = (self.instance_label >= 0) & (self.semantic_label >= 0)
        if not np.array_equal(both, self.annotated_mask):
            raise ValidationError("annotated_mask must flag exactly the superpoints carrying both labels")


def _compatible_pairs(cloud, params):
    """All compatible point pairs ``(i, j)``, ``i < j``.

    Points in 26-adjacent voxels are at most ``2 * sqrt(3) * grid_size``
    apart, so a radius query yields a superset that is then filtered exactly.
    """
    cells = voxel_indices(cloud.positions, params.grid_size, cloud.positions.min(axis=0))
    tree = cKDTree(cloud.positions)
    pairs = tree.query_pairs(2 * np.sqrt(3) * params.grid_size * (1 + 1e-9), output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    keep = np.abs(cells[i] - cells[j]).max(axis=1) <= 1
    if cloud.normals is not None:
        cos_max = np.cos(np.deg2rad(params.normal_angle_max))
        keep &= np.einsum("ij,ij->i", cloud.normals[i], cloud.normals[j]) >= cos_max
    if cloud.colors is not None:
        keep &= np.linalg.norm(cloud.colors[i] - cloud.colors[j], axis=1) <= params.color_dist_max
    return pairs[keep]


def _grow_regions(cloud, params):
    """Region id per point; ids ordered by each region's lowest point index.

    Compatibility is symmetric, so growing breadth first from the lowest
    unvisited point reaches exactly a connected component of the
    compatibility graph; components are computed directly.
    """
    n = len(cloud)
    pairs = _compatible_pairs(cloud, params)
    G = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    nreg, labels = connected_components(G, directed=False)
    # relabel so region ids follow the seed (lowest member) order
    first = np.full(nreg, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    rank = np.empty(nreg, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(nreg)
    return rank[labels], nreg


def _point_order_key(cloud, idx):
    cols = [cloud.positions[idx]]
    cols += [f[idx] for f in (cloud.colors, cloud.normals) if f is not None]
    return np.concatenate(cols, axis=1)


def _bisect(cloud, idx, max_size):
    """Median bisection along the longest extent until pieces have <= max_size points."""
    if len(idx) <= max_size:
        return [idx]
    pts = cloud.positions[idx]
    axis = int(np.argmax(np.ptp(pts, axis=0)))
    # lexicographic tie break on coordinates keeps the split order independent
    key = _point_order_key(cloud, idx)
    order = np.lexsort(tuple(key[:, c] for c in reversed([axis] + [c for c in range(key.shape[1]) if c != axis])))
    half = len(idx) // 2
    return _bisect(cloud, idx[order[:half]], max_size) + _bisect(cloud, idx[order[half:]], max_size)


def oversegment(cloud: PointCloud, params: OversegParams | None = None) -> Superpointization:
    params = params or OversegParams()
    if len(cloud) == 0:
        raise ValidationError("cannot oversegment an empty cloud")
    region, nreg = _grow_regions(cloud, params)
    target = max(1, int(params.target_superpoint_size))
    pieces = []
    order = np.argsort(region, kind="stable")
    counts = np.bincount(region, minlength=nreg)
    for idx in np.split(order, np.cumsum(counts)[:-1]):
        if len(idx) > 8 * target:
            pieces.extend(_bisect(cloud, idx, target))
        else:
            pieces.append(idx)
    # canonical ids: superpoints ordered by their smallest point index
    pieces.sort(key=lambda p: int(p.min()))
    assignment = np.empty(len(cloud), dtype=np.int64)
    for sid, idx in enumerate(pieces):
        assignment[idx] = sid
    return Superpointization.from_assignment(assignment, cloud)


def load_superpointization(path, cloud: PointCloud) -> Superpointization:
    """Read a whitespace-separated assignment file and validate it against ``cloud``."""
    ids = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        for tok in line.split():
            try:
                ids.append(int(tok))
            except ValueError:
                raise ParseError(f"not an integer: {tok!r}", path, lineno) from None
    return Superpointization.from_assignment(np.array(ids, dtype=np.int64), cloud)


def lift_labels(sp: Superpointization, ann) -> SuperpointWeakLabels:
    inst = np.full(sp.num_superpoints, -1, dtype=np.int64)
    sem = np.full(sp.num_superpoints, -1, dtype=np.int64)
    for point, iid, cls in ann.entries:
        if not 0 <= point < len(sp.assignment):
            raise ValidationError(f"click point index {point} out of range")
        s = sp.assignment[point]
        if inst[s] >= 0 and inst[s] != iid:
            raise LabelConflictError(int(s), int(inst[s]), int(iid))
        inst[s] = iid
        sem[s] = cls
    return SuperpointWeakLabels(inst, sem, inst >= 0)
