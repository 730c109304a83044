"""Instance segmentation metrics and pseudo-label quality.

Matching is greedy and one-to-one. For AP, predictions of a class are taken
in descending confidence (ties: lower instance index first) and each grabs
the unmatched ground-truth instance of highest IoU at or above the threshold.
AP per class is the all-point interpolated area under the precision/recall
curve; class APs are averaged over classes present in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
COVERAGE_IOU = 0.5
SUMMARY_KEYS = ("AP", "AP50", "AP25", "mCov", "mWCov", "mPrec", "mRec")


@dataclass
class GroundTruth:
    """Ground-truth instances as sorted point-id arrays with their classes."""

    point_sets: list
    classes: np.ndarray

    @classmethod
    def from_cloud(cls, cloud):
        ids = cloud.instance_ids()
        sets = [np.flatnonzero(cloud.gt_instance == i) for i in ids]
        classes = np.array([int(cloud.gt_semantic[s[0]]) for s in sets], dtype=np.int64)
        return cls(sets, classes)

    def __len__(self):
        return len(self.point_sets)


@dataclass
class MetricsReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP25: float = 0.0
    mCov: float = 0.0
    mWCov: float = 0.0
    mPrec: float = 0.0
    mRec: float = 0.0
    per_class: dict = field(default_factory=dict)  # class -> {"AP","AP50","AP25"}
    extra: dict = field(default_factory=dict)

    def summary(self):
        return {k: getattr(self, k) for k in SUMMARY_KEYS}

    def as_kv(self):
        """Flat, ordered key/value pairs with fixed 6-decimal formatting."""
        kv = {k: f"{v:.6f}" for k, v in self.summary().items()}
        for c in sorted(self.per_class):
            for k, v in self.per_class[c].items():
                kv[f"class{c}.{k}"] = f"{v:.6f}"
        for k, v in self.extra.items():
            kv[k] = f"{v:.6f}" if isinstance(v, float) else str(v)
        return kv

    def to_text(self):
        kv = self.as_kv()
        lines = ["metric\tvalue"]
        lines += [f"{k}\t{kv[k]}" for k in SUMMARY_KEYS]
        if self.per_class:
            lines += ["", "class\tAP\tAP50\tAP25"]
            for c in sorted(self.per_class):
                pc = self.per_class[c]
                lines.append(f"{c}\t{pc['AP']:.6f}\t{pc['AP50']:.6f}\t{pc['AP25']:.6f}")
        lines += ["", "## kv"]
        lines += [f"{k}={v}" for k, v in kv.items()]
        return "\n".join(lines) + "\n"


def parse_kv_block(text):
    """Read the ``## kv`` block of a report written by :meth:`MetricsReport.to_text`."""
    out = {}
    inside = False
    for line in text.splitlines():
        if line.strip() == "## kv":
            inside = True
            continue
        if inside and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _pred_points(pred):
    return [np.asarray(i.point_ids, dtype=np.int64) for i in pred]


def match_and_iou(pred, gt: GroundTruth):
    """IoU matrix of shape (num_pred, num_gt); cross-class pairs are 0."""
    psets = _pred_points(pred)
    iou = np.zeros((len(psets), len(gt)))
    for a, (p, inst) in enumerate(zip(psets, pred)):
        for b, (g, c) in enumerate(zip(gt.point_sets, gt.classes)):
            if inst.semantic_class != c:
                continue
            inter = len(np.intersect1d(p, g, assume_unique=True))
            if inter:
                iou[a, b] = inter / (len(p) + len(g) - inter)
    return iou


def _class_ap(conf, iou, threshold):
    """AP for one class; ``iou`` is (num_pred, num_gt) restricted to the class."""
    n_gt = iou.shape[1]
    if n_gt == 0:
        return None
    if iou.shape[0] == 0:
        return 0.0
    order = sorted(range(len(conf)), key=lambda k: (-conf[k], k))
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        cand = np.where(~taken & (iou[k] >= threshold), iou[k], -1.0)
        b = int(np.argmax(cand))
        if cand[b] >= 0 and iou[k, b] >= threshold:
            taken[b] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(order) + 1)
    recall = ctp / n_gt
    # all-point interpolation
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def average_precision(pred, gt: GroundTruth, thresholds=AP_THRESHOLDS, iou=None):
    """Per-class AP at each threshold, plus aggregates.

    Returns ``(per_class, by_threshold)`` where ``per_class[c][thr]`` is the
    class AP and ``by_threshold[thr]`` its mean over ground-truth classes.
    """
    if iou is None:
        iou = match_and_iou(pred, gt)
    pcls = np.array([i.semantic_class for i in pred], dtype=np.int64)
    conf = np.array([i.confidence for i in pred], dtype=np.float64)
    per_class = {}
    for c in np.unique(gt.classes):
        rows = np.flatnonzero(pcls == c)
        cols = np.flatnonzero(gt.classes == c)
        sub = iou[np.ix_(rows, cols)]
        per_class[int(c)] = {float(t): _class_ap(conf[rows], sub, t) for t in thresholds}
    by_thr = {float(t): float(np.mean([per_class[c][float(t)] for c in per_class])) if per_class else 0.0
              for t in thresholds}
    return per_class, by_thr


def coverage_metrics(pred, gt: GroundTruth, iou=None, threshold=COVERAGE_IOU):
    """``(mCov, mWCov, mPrec, mRec)``; mPrec is 0 when there are no predictions."""
    if iou is None:
        iou = match_and_iou(pred, gt)
    if len(gt) == 0:
        return 0.0, 0.0, 0.0, 0.0
    best = iou.max(axis=0) if iou.shape[0] else np.zeros(len(gt))
    sizes = np.array([len(g) for g in gt.point_sets], dtype=np.float64)
    mcov = float(best.mean())
    mwcov = float((best * sizes).sum() / sizes.sum())
    matched = 0
    if iou.shape[0]:
        pairs = np.argwhere(iou >= threshold)
        vals = iou[pairs[:, 0], pairs[:, 1]]
        order = np.lexsort((pairs[:, 1], pairs[:, 0], -vals))
        used_p, used_g = set(), set()
        for k in order:
            a, b = pairs[k]
            if a in used_p or b in used_g:
                continue
            used_p.add(a)
            used_g.add(b)
            matched += 1
    mprec = matched / iou.shape[0] if iou.shape[0] else 0.0
    mrec = matched / len(gt)
    return mcov, mwcov, float(mprec), float(mrec)


def evaluate_instances(pred, gt: GroundTruth) -> MetricsReport:
    iou = match_and_iou(pred, gt)
    thresholds = sorted(set(AP_THRESHOLDS) | {0.25})
    per_class, by_thr = average_precision(pred, gt, thresholds, iou)
    ap_main = [by_thr[float(t)] for t in AP_THRESHOLDS]
    pc = {
        c: {
            "AP": float(np.mean([v[float(t)] for t in AP_THRESHOLDS])),
            "AP50": v[0.5],
            "AP25": v[0.25],
        }
        for c, v in per_class.items()
    }
    mcov, mwcov, mprec, mrec = coverage_metrics(pred, gt, iou)
    return MetricsReport(float(np.mean(ap_main)), by_thr[0.5], by_thr[0.25], mcov, mwcov, mprec, mrec, pc)


def mean_report(reports):
    """Average reports field-wise (per-scene metrics, then scene mean)."""
    if not reports:
        return MetricsReport()
    out = MetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in SUMMARY_KEYS})
    classes = sorted({c for r in reports for c in r.per_class})
    for c in classes:
        rs = [r.per_class[c] for r in reports if c in r.per_class]
        out.per_class[c] = {k: float(np.mean([x[k] for x in rs])) for k in ("AP", "AP50", "AP25")}
    return out


@dataclass
class PseudoLabelQuality:
    proportion: float
    accuracy: float


def pseudo_label_quality(state, sp, gt_instance, include_annotated=True) -> PseudoLabelQuality:
    """Point-level proportion and accuracy of superpoint labels.

    A point is labeled when its superpoint is; it is correct when its gt
    instance equals the instance id carried by the label (the clicked
    instance). With ``include_annotated=False`` annotated superpoints are
    left out of the accuracy (they still count toward the proportion).
    """
    gt_instance = np.asarray(gt_instance, dtype=np.int64)
    point_label = state.instance_label[sp.assignment]
    labeled = point_label >= 0
    proportion = float(labeled.mean()) if len(labeled) else 0.0
    scored = labeled.copy()
    if not include_annotated:
        scored &= ~state.annotated[sp.assignment]
    n = int(scored.sum())
    accuracy = float((point_label[scored] == gt_instance[scored]).sum() / n) if n else 0.0
    return PseudoLabelQuality(proportion, accuracy)
