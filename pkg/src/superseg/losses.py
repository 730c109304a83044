"""Loss evaluators for the two training stages.

Only the discriminative affinity loss comes with an analytic gradient; the
other terms are standard and evaluated value-only.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ValidationError


@dataclass
class LossConfig:
    delta_v: float = 0.1
    delta_d: float = 1.5
    alpha: float = 0.001
    class_count: int | None = None
    pseudo_weight: float = 1.0

    def __post_init__(self):
        if not (self.delta_d > self.delta_v > 0):
            raise ValidationError("need delta_d > delta_v > 0")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")


@dataclass
class AffinityLoss:
    var: float
    dist: float
    reg: float
    total: float


def _weights(mask, pseudo_mask, pseudo_weight):
    mask = np.asarray(mask, dtype=bool)
    w = mask.astype(np.float64)
    if pseudo_mask is not None:
        w[np.asarray(pseudo_mask, dtype=bool) & mask] *= pseudo_weight
    if mask.sum() < 1:
        raise DomainError("loss needs at least one labeled superpoint")
    return w


def semantic_loss(logits, gt_class, mask, pseudo_mask=None, pseudo_weight=1.0):
    """Weighted mean cross-entropy over masked superpoints (log-sum-exp form)."""
    logits = np.asarray(logits, dtype=np.float64)
    w = _weights(mask, pseudo_mask, pseudo_weight)
    gt = np.asarray(gt_class)
    m = w > 0
    z = logits[m]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = lse - z[np.arange(len(z)), gt[m].astype(np.int64)]
    return float((ce * w[m]).sum() / w.sum())


def offset_loss(pred_o, gt_o, mask, pseudo_mask=None, pseudo_weight=1.0):
    """Weighted mean L1 distance between predicted and target offsets."""
    w = _weights(mask, pseudo_mask, pseudo_weight)
    l1 = np.abs(np.asarray(pred_o, dtype=np.float64) - np.asarray(gt_o, dtype=np.float64)).sum(axis=1)
    return float((l1 * w).sum() / w.sum())


def _groups(assignment):
    assignment = np.asarray(assignment, dtype=np.int64)
    ids = np.unique(assignment[assignment >= 0])
    if len(ids) == 0:
        raise DomainError("affinity loss needs at least one labeled instance")
    return [np.flatnonzero(assignment == i) for i in ids]


def affinity_loss(X, assignment, cfg: LossConfig | None = None, return_grad=False):
    """Discriminative loss on labeled superpoint embeddings.

    ``assignment`` maps every superpoint to an instance id, -1 for unlabeled;
    unlabeled rows neither contribute nor receive gradient. With a single
    instance the distance term is 0.
    """
    cfg = cfg or LossConfig()
    X = np.asarray(X, dtype=np.float64)
    groups = _groups(assignment)
    I = len(groups)
    mu = np.stack([X[g].mean(axis=0) for g in groups])
    grad = np.zeros_like(X) if return_grad else None

    var = 0.0
    for gi, g in enumerate(groups):
        e = mu[gi] - X[g]
        d = np.linalg.norm(e, axis=1)
        h = np.maximum(d - cfg.delta_v, 0.0)
        var += (h ** 2).sum() / len(g)
        if return_grad:
            # d/dx_m of h_j^2 through e_j = mu - x_j, with d mu / d x_m = 1/n
            coef = np.divide(2 * h, d, out=np.zeros_like(d), where=d > 0)
            gvec = coef[:, None] * e
            grad[g] += (gvec.sum(axis=0)[None, :] / len(g) - gvec) / (I * len(g))
    var /= I

    dist = 0.0
    dmu = np.zeros_like(mu)
    if I >= 2:
        norm = I * (I - 1)
        for a in range(I):
            diff = mu[a] - mu
            D = np.linalg.norm(diff, axis=1)
            q = np.maximum(2 * cfg.delta_d - D, 0.0)
            q[a] = 0.0
            dist += (q ** 2).sum()
            # each unordered pair appears twice in the ordered double sum
            coef = np.divide(q, D, out=np.zeros_like(D), where=D > 0)
            dmu[a] += (-4.0 / norm) * (coef[:, None] * diff).sum(axis=0)
        dist /= norm

    mu_norm = np.linalg.norm(mu, axis=1)
    reg = float(mu_norm.mean())
    total = var + dist + cfg.alpha * reg
    result = AffinityLoss(float(var), float(dist), reg, float(total))
    if not return_grad:
        return result
    dmu += cfg.alpha / I * np.divide(mu, mu_norm[:, None], out=np.zeros_like(mu), where=mu_norm[:, None] > 0)
    for gi, g in enumerate(groups):
        grad[g] += dmu[gi] / len(g)
    return result, grad


def volume_loss(pred_u, pred_r, instance_assignment, stats):
    """Mean absolute voxel-count plus radius error against pseudo-instance statistics.

    ``instance_assignment[i]`` indexes into ``stats`` (-1 = unlabeled).
    """
    a = np.asarray(instance_assignment, dtype=np.int64)
    lab = np.flatnonzero(a >= 0)
    if len(lab) == 0:
        raise DomainError("volume loss needs at least one labeled superpoint")
    if a.max() >= len(stats.voxels):
        raise DomainError(f"superpoint assigned to unknown instance {int(a.max())}")
    u = np.asarray(pred_u, dtype=np.float64)[lab]
    r = np.asarray(pred_r, dtype=np.float64)[lab]
    err = np.abs(u - stats.voxels[a[lab]]) + np.abs(r - stats.radius[a[lab]])
    return float(err.sum() / len(lab))


_STAGE_PARTS = {1: ("sem", "offset", "aff"), 2: ("sem", "offset", "volume")}


def stage_loss(stage, parts):
    """Sum of the stage's loss terms.

    ``parts`` is a mapping with keys ``sem``, ``offset`` and ``aff`` (stage 1)
    or ``volume`` (stage 2), or a 3-sequence in that order.
    """
    if stage not in _STAGE_PARTS:
        raise ValidationError(f"unknown stage {stage!r}")
    names = _STAGE_PARTS[stage]
    if not isinstance(parts, Mapping):
        parts = list(parts)
        if len(parts) != 3:
            raise ValidationError(f"stage {stage} needs exactly 3 parts")
        parts = dict(zip(names, parts))
    missing = [n for n in names if n not in parts]
    if missing:
        raise ValidationError(f"stage {stage} loss missing parts: {', '.join(missing)}")
    total = 0.0
    for n in names:
        v = parts[n]
        total += v.total if isinstance(v, AffinityLoss) else float(v)
    return total


def _near_hinge(X, assignment, cfg, margin):
    groups = _groups(assignment)
    mu = np.stack([X[g].mean(axis=0) for g in groups])
    for gi, g in enumerate(groups):
        d = np.linalg.norm(mu[gi] - X[g], axis=1)
        if (np.abs(d - cfg.delta_v) < margin).any() or (d < margin).any():
            return True
    for a in range(len(groups)):
        D = np.linalg.norm(mu[a] - np.delete(mu, a, axis=0), axis=1)
        if (np.abs(D - 2 * cfg.delta_d) < margin).any() or (D < margin).any():
            return True
    return bool((np.linalg.norm(mu, axis=1) < margin).any())


def grad_check(X, assignment, cfg: LossConfig | None = None, h=1e-5, margin=None, seed=0):
    """Max relative error between the analytic and central-difference gradient.

    Configurations within ``margin`` of a hinge (or of a zero norm) are
    first nudged with small deterministic jitter, since the loss is not
    differentiable there. Entries with ``|analytic| <= 1e-8`` are skipped.
    """
    if not h > 0:
        raise ValidationError("step h must be positive")
    cfg = cfg or LossConfig()
    margin = 100 * h if margin is None else margin
    X = np.array(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        if not _near_hinge(X, assignment, cfg, margin):
            break
        X = X + rng.normal(scale=10 * margin, size=X.shape)
    _, analytic = affinity_loss(X, assignment, cfg, return_grad=True)
    rows = np.flatnonzero(np.asarray(assignment) >= 0)
    worst = 0.0
    for i in rows:
        for k in range(X.shape[1]):
            a = analytic[i, k]
            if abs(a) <= 1e-8:
                continue
            Xp = X.copy()
            Xm = X.copy()
            Xp[i, k] += h
            Xm[i, k] -= h
            num = (affinity_loss(Xp, assignment, cfg).total - affinity_loss(Xm, assignment, cfg).total) / (2 * h)
            worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst
