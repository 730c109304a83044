"""Pseudo instances by offset voting, instance volume statistics and
volume-aware clustering on the superpoint graph."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError
from .pcio import DEFAULT_VOXEL_SIZE, voxel_count, voxel_indices
from .provider import instance_radius

DEFAULT_LAMBDA = 0.25
DEFAULT_BETA = 0.3
CONFIDENCE_EPS = 1e-9


@dataclass(frozen=True)
class Instance:
    superpoint_ids: frozenset
    semantic_class: int
    confidence: float = 1.0
    point_ids: np.ndarray | None = None


@dataclass
class InstanceSet:
    instances: list
    provenance: str = "clustered"

    def __post_init__(self):
        seen = set()
        for inst in self.instances:
            if not inst.superpoint_ids:
                raise ValidationError("instances must be nonempty")
            if seen & inst.superpoint_ids:
                raise ValidationError("instances share superpoints")
            seen |= inst.superpoint_ids
            if not 0.0 <= inst.confidence <= 1.0:
                raise ValidationError("confidence must lie in [0, 1]")

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def superpoint_labels(self, num_superpoints):
        """Per-superpoint instance index (-1 where unassigned)."""
        out = np.full(num_superpoints, -1, dtype=np.int64)
        for k, inst in enumerate(self.instances):
            out[list(inst.superpoint_ids)] = k
        return out

    def with_points(self, sp):
        """Copy with ``point_ids`` filled in from a superpointization."""
        return InstanceSet(
            [Instance(i.superpoint_ids, i.semantic_class, i.confidence, sp.point_ids(i.superpoint_ids))
             for i in self.instances],
            self.provenance,
        )


@dataclass
class VolumeStats:
    voxels: np.ndarray  # per instance, >= 1
    radius: np.ndarray  # per instance, >= 0


def shift_superpoints(centroids, offsets):
    centroids = np.asarray(centroids, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if centroids.shape != offsets.shape:
        raise ValidationError("centroids and offsets must have equal shape")
    return centroids + offsets


def vote_pseudo_instances(shifted, semantics, labels, sp=None) -> InstanceSet:
    """Assign each superpoint to the nearest same-class annotated superpoint.

    Distances are measured between shifted coordinates. Annotated
    superpoints always belong to their own instance; a superpoint whose
    predicted class matches no annotation stays unassigned.
    """
    shifted = np.asarray(shifted, dtype=np.float64)
    semantics = np.asarray(semantics, dtype=np.int64)
    anchors = np.flatnonzero(labels.annotated)
    if len(anchors) == 0:
        raise DomainError("voting needs at least one annotated superpoint")
    anchor_cls = labels.semantic_label[anchors]
    anchor_inst = labels.instance_label[anchors]
    members = {int(i): set() for i in anchor_inst}
    classes = {int(i): int(c) for i, c in zip(anchor_inst, anchor_cls)}
    for a, iid in zip(anchors, anchor_inst):
        members[int(iid)].add(int(a))
    annotated = set(anchors.tolist())
    for s in range(len(shifted)):
        if s in annotated:
            continue
        same = anchor_cls == semantics[s]
        if not same.any():
            continue
        cand = anchors[same]
        d = np.linalg.norm(shifted[cand] - shifted[s], axis=1)
        best = cand[np.argmin(d)]  # argmin keeps the first (lowest id) on ties
        members[int(labels.instance_label[best])].add(s)
    insts = [Instance(frozenset(members[i]), classes[i], 1.0) for i in sorted(members)]
    out = InstanceSet(insts, "pseudo")
    return out.with_points(sp) if sp is not None else out


def instance_volume_stats(instances: InstanceSet, cloud, voxel_size=DEFAULT_VOXEL_SIZE) -> VolumeStats:
    vox, rad = [], []
    for inst in instances:
        if inst.point_ids is None or len(inst.point_ids) == 0:
            raise DomainError("instance has no points")
        pts = cloud.positions[inst.point_ids]
        vox.append(voxel_count(pts, voxel_size))
        rad.append(instance_radius(pts))
    return VolumeStats(np.array(vox, dtype=np.float64), np.array(rad, dtype=np.float64))


def superpoint_occupancy(cloud, sp, voxel_size=DEFAULT_VOXEL_SIZE):
    """Occupied voxel indices of every superpoint on one scene-wide grid.

    The grid is anchored at the cloud's min corner so unions over
    superpoints count shared cells once.
    """
    idx = voxel_indices(cloud.positions, voxel_size, cloud.positions.min(axis=0))
    return [np.unique(idx[m], axis=0) for m in sp.member_lists]


def _union_count(occupancy, ids):
    return int(len(np.unique(np.concatenate([occupancy[i] for i in ids]), axis=0)))


def bfs_proposals(graph, shifted, semantics, radius, lam=DEFAULT_LAMBDA):
    """Radius-gated breadth-first grouping; proposals in discovery order."""
    n = graph.num_nodes
    visited = np.zeros(n, dtype=bool)
    proposals = []
    for v in range(n):
        if visited[v]:
            continue
        visited[v] = True
        queue = deque([v])
        H = [v]
        while queue:
            j = queue.popleft()
            nb = graph.neighbor_lists[j]
            if len(nb) == 0:
                continue
            ok = (semantics[nb] == semantics[j]) & (
                np.linalg.norm(shifted[nb] - shifted[j], axis=1) < lam * radius[j]
            )
            for k in nb[ok]:
                if not visited[k]:
                    visited[k] = True
                    queue.append(int(k))
                    H.append(int(k))
        proposals.append(H)
    return proposals


def volume_aware_cluster(graph, shifted, semantics, voxel_pred, radius_pred, occupancy,
                         lam=DEFAULT_LAMBDA, beta=DEFAULT_BETA, sp=None) -> InstanceSet:
    """Volume-aware instance clustering.

    Proposals come from :func:`bfs_proposals`. A proposal whose occupied
    voxel count ``w`` exceeds ``beta`` times the mean predicted voxel count
    of its members becomes an instance. Every other proposal is merged into
    the same-class instance whose mean shifted coordinate is closest to its
    own; when no same-class instance exists it is promoted to an instance
    itself. Instance statistics are frozen once created.

    Confidence is ``min(1, w / (beta * w_pred + eps))``.
    """
    n = graph.num_nodes
    shifted = np.asarray(shifted, dtype=np.float64)
    semantics = np.asarray(semantics, dtype=np.int64)
    voxel_pred = np.asarray(voxel_pred, dtype=np.float64)
    radius_pred = np.asarray(radius_pred, dtype=np.float64)
    for name, arr in (("shifted", shifted), ("semantics", semantics), ("voxel_pred", voxel_pred),
                      ("radius_pred", radius_pred), ("occupancy", occupancy)):
        if len(arr) != n:
            raise ValidationError(f"{name} has {len(arr)} rows, expected {n}")
    if not (lam > 0 and beta > 0):
        raise ValidationError("lambda and beta must be positive")

    proposals = bfs_proposals(graph, shifted, semantics, radius_pred, lam)
    stats = []
    for H in proposals:
        w = _union_count(occupancy, H)
        w_pred = float(voxel_pred[H].mean())
        stats.append((w, w_pred))

    kept = []  # [members, class, confidence, centre]
    leftovers = []
    for H, (w, w_pred) in zip(proposals, stats):
        conf = min(1.0, w / (beta * w_pred + CONFIDENCE_EPS))
        entry = [list(H), int(semantics[H[0]]), conf, shifted[H].mean(axis=0)]
        (kept if w > beta * w_pred else leftovers).append(entry)

    for H, cls, conf, centre in leftovers:
        targets = [k for k, inst in enumerate(kept) if inst[1] == cls]
        if not targets:
            kept.append([list(H), cls, conf, centre])
            continue
        d = [np.linalg.norm(kept[k][3] - centre) for k in targets]
        kept[targets[int(np.argmin(d))]][0].extend(H)

    out = InstanceSet([Instance(frozenset(H), cls, conf) for H, cls, conf, _ in kept], "clustered")
    return out.with_points(sp) if sp is not None else out
