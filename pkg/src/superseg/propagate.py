"""Semantic-aware random-walk label propagation on the superpoint graph.

Three weighting modes mirror the ablation of walk constraints:

``random_only``
    uniform weights on graph edges, shared by all classes
``affinity``
    graph edges weighted by the affinity matrix, shared by all classes
``affinity_semantic``
    per class ``c``, edges weighted by affinity and kept only when both
    endpoints are predicted as ``c``

After row normalization, ``T_hat = T ** t`` gives the probability that a walk
of ``t`` steps started at ``i`` ends at ``j``. An unlabeled node ``j`` takes
the label of the labeled source maximizing ``T_hat[i, j]`` in the matrix of
its own predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

MODES = ("random_only", "affinity", "affinity_semantic")
DEFAULT_STEPS = 3

ANNOTATED, PSEUDO, NONE = "annotated", "pseudo", "none"

# relative gap under which two walk probabilities count as tied
TIE_TOL = 1e-12


@dataclass
class LabelState:
    """Per-superpoint instance/semantic labels with provenance.

    ``instance_label`` and ``semantic_label`` are -1 where unlabeled;
    ``source`` holds one of ``"annotated"``, ``"pseudo"``, ``"none"``.
    """

    instance_label: np.ndarray
    semantic_label: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        self.instance_label = np.asarray(self.instance_label, dtype=np.int64)
        self.semantic_label = np.asarray(self.semantic_label, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=object)
        labeled = self.instance_label >= 0
        if not np.array_equal(labeled, self.source != NONE):
            raise ValidationError("source must be 'none' exactly where instance_label is -1")
        if (self.semantic_label[labeled] < 0).any():
            raise ValidationError("labeled superpoints need a semantic label")
        cls_of = {}
        for i, c in zip(self.instance_label[labeled], self.semantic_label[labeled]):
            if cls_of.setdefault(int(i), int(c)) != c:
                raise ValidationError(f"instance {int(i)} carries more than one semantic label")

    @classmethod
    def from_weak_labels(cls, weak):
        src = np.where(weak.annotated_mask, ANNOTATED, NONE).astype(object)
        return cls(weak.instance_label.copy(), weak.semantic_label.copy(), src)

    def __len__(self):
        return len(self.instance_label)

    @property
    def labeled(self):
        return self.instance_label >= 0

    @property
    def annotated(self):
        return self.source == ANNOTATED

    @property
    def pseudo(self):
        return self.source == PSEUDO

    def save(self, path):
        lines = ["superpoint\tinstance_label\tsemantic_label\tsource"]
        for s in range(len(self)):
            lines.append(f"{s}\t{self.instance_label[s]}\t{self.semantic_label[s]}\t{self.source[s]}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        rows = [r.split("\t") for r in Path(path).read_text().splitlines()[1:] if r]
        return cls(
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([int(r[2]) for r in rows], dtype=np.int64),
            np.array([r[3] for r in rows], dtype=object),
        )


@dataclass
class TransitionSet:
    """Row-stochastic transition matrices keyed by class.

    In class-agnostic modes every class maps to the same matrix.
    """

    matrices: dict
    classes: tuple
    mode: str
    node_class: np.ndarray = field(repr=False)

    def for_class(self, c):
        return self.matrices[int(c)]

    def dump(self, path, t=1):
        """Coordinate-format text of ``T^t`` per class: ``class i j value``."""
        lines = []
        for c in self.classes:
            P = matrix_power(self.for_class(c), t).tocoo()
            order = np.lexsort((P.col, P.row))
            lines += [f"{c} {P.row[k]} {P.col[k]} {float(P.data[k])!r}" for k in order]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def weight_matrix(graph, A, semantics, c=None, mode="affinity_semantic") -> sp.csr_matrix:
    """Edge weights ``P`` for class ``c`` under ``mode``."""
    n = graph.num_nodes
    semantics = np.asarray(semantics, dtype=np.int64)
    if semantics.shape != (n,):
        raise ValidationError(f"semantics must have length {n}")
    M = graph.adjacency.astype(np.float64).tocsr()
    if mode == "random_only":
        return M
    if mode not in MODES:
        raise ValidationError(f"unknown propagation mode {mode!r}")
    P = M.multiply(A).tocsr()
    if mode == "affinity":
        return P
    if c is None or int(c) not in set(semantics.tolist()):
        raise ValidationError(f"unknown class id {c!r}")
    in_c = (semantics == int(c)).astype(np.float64)
    S = sp.diags(in_c) @ P @ sp.diags(in_c)
    S = S.tocsr()
    S.eliminate_zeros()
    return S


def transition_matrix(P) -> sp.csr_matrix:
    """Row-normalize ``P``; zero rows stay zero."""
    P = sp.csr_matrix(P, dtype=np.float64)
    if P.nnz and P.data.min() < 0:
        raise ValidationError("transition weights must be non-negative")
    P.eliminate_zeros()
    sums = np.asarray(P.sum(axis=1)).ravel()
    # divide rather than scale by 1/sum: a subnormal row sum would overflow
    T = sp.csr_matrix((P.data / np.repeat(sums, np.diff(P.indptr)), P.indices, P.indptr), shape=P.shape)
    T.sort_indices()
    return T


def build_transitions(graph, A, semantics, mode="affinity_semantic") -> TransitionSet:
    semantics = np.asarray(semantics, dtype=np.int64)
    classes = tuple(int(c) for c in np.unique(semantics))
    if mode == "affinity_semantic":
        mats = {c: transition_matrix(weight_matrix(graph, A, semantics, c, mode)) for c in classes}
    else:
        shared = transition_matrix(weight_matrix(graph, A, semantics, None, mode))
        mats = {c: shared for c in classes}
    return TransitionSet(mats, classes, mode, semantics)


def matrix_power(T, t):
    """``T ** t`` by repeated sparse products."""
    if t < 1:
        raise ValidationError("walk length t must be >= 1")
    out = T.tocsr()
    for _ in range(t - 1):
        out = (out @ T).tocsr()
    return out


def select_source(column, sources):
    """Index of the source with the highest walk probability, or -1.

    ``column`` holds walk probabilities into the target node. Values within
    ``TIE_TOL`` (relative) of the maximum tie, and ties go to the smallest
    source index.
    """
    if len(sources) == 0:
        return -1
    vals = column[sources]
    best = vals.max()
    if not best > 0:
        return -1
    tied = sources[vals >= best * (1 - TIE_TOL)]
    return int(tied.min())


def propagate_labels(transitions: TransitionSet, state: LabelState, t=DEFAULT_STEPS,
                     sources="labeled") -> LabelState:
    """One propagation round; reads ``state`` and returns a fresh state.

    ``sources="labeled"`` lets annotated and pseudo labels donate;
    ``sources="annotated"`` restricts donors to annotated superpoints.
    """
    if t < 1:
        raise ValidationError("walk length t must be >= 1")
    node_class = transitions.node_class
    if len(node_class) != len(state):
        raise ValidationError("transition set and label state disagree on |V|")
    donors = state.annotated if sources == "annotated" else state.labeled
    donor_idx = np.flatnonzero(donors)
    inst = state.instance_label.copy()
    sem = state.semantic_label.copy()
    src = state.source.copy()
    targets = np.flatnonzero(~state.labeled)
    if len(donor_idx) == 0 or len(targets) == 0:
        return LabelState(inst, sem, src)
    # group targets by transition matrix; shared matrices are powered once
    groups = {}
    for j in targets:
        T = transitions.for_class(int(node_class[j]))
        groups.setdefault(id(T), (T, []))[1].append(j)
    for T, cols in groups.values():
        cols = np.asarray(cols, dtype=np.int64)
        block = matrix_power(T, t).tocsr()[donor_idx][:, cols].toarray()
        best = block.max(axis=0)
        tied = block >= best * (1 - TIE_TOL)
        # donor_idx is ascending, so the first tied row is the smallest id
        pick = donor_idx[np.argmax(tied, axis=0)]
        ok = best > 0
        j, k = cols[ok], pick[ok]
        inst[j] = state.instance_label[k]
        sem[j] = state.semantic_label[k]
        src[j] = PSEUDO
    return LabelState(inst, sem, src)


def run_rounds(graph, A_for_round, semantics_for_round, state, rounds, t=DEFAULT_STEPS,
               mode="affinity_semantic", sources="labeled", on_round=None):
    """Repeat propagation ``rounds`` times; pseudo labels persist between rounds.

    ``A_for_round(r)`` and ``semantics_for_round(r)`` supply the (re)computed
    affinity and predicted semantics for round ``r`` (1-based).
    """
    for r in range(1, rounds + 1):
        T = build_transitions(graph, A_for_round(r), semantics_for_round(r), mode)
        state = propagate_labels(T, state, t, sources)
        if on_round is not None:
            on_round(r, state, T)
    return state

