"""End-to-end two-stage pipeline on one or more scenes.

Per scene::

    cloud -> superpoints -> lifted clicks -> graph -> predictions -> affinity
          -> propagation rounds -> pseudo instances + volume stats (stage 1)
          -> volume-aware clustering (stage 2) -> metrics

Every intermediate artifact is written to ``<out>/scene_NNN/`` and the
scene-averaged report to ``<out>/report.txt``.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import affinity as aff
from . import instance as inst
from . import losses
from .config import SWEEP_KEYS, PipelineConfig
from .errors import LabelConflictError, PipelineError, SupersegError, ValidationError
from .metrics import GroundTruth, MetricsReport, evaluate_instances, mean_report, pseudo_label_quality
from .overseg import lift_labels, load_superpointization, oversegment
from .pcio import load_point_cloud, save_point_cloud, write_results
from .propagate import LabelState, build_transitions, propagate_labels
from .provider import load_predictions, oracle_predictions
from .spgraph import build_graph
from .synth import WeakAnnotation, generate_scene, sample_weak_labels

log = logging.getLogger(__name__)

CLICK_RETRIES = 16


def derive_seed(*parts):
    """Deterministic 63-bit seed from integer / string parts."""
    ints = [p if isinstance(p, int) else int.from_bytes(str(p).encode(), "little") % (2**32) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@contextmanager
def stage(name):
    try:
        yield
    except PipelineError:
        raise
    except (SupersegError, ValueError) as err:
        raise PipelineError(name, err) from err


@dataclass
class SceneResult:
    report: MetricsReport | None
    quality: list = field(default_factory=list)  # (round, proportion, accuracy)
    losses: dict = field(default_factory=dict)


def scene_dir(cfg, index):
    return Path(cfg.out) / f"scene_{index:03d}" if cfg.out else None


def load_or_generate_cloud(cfg, index):
    if cfg.source == "files":
        return load_point_cloud(cfg.cloud_path)
    spec = replace(cfg.scene, rng_seed=derive_seed(cfg.seed, index, "scene"))
    return generate_scene(spec)


def make_superpoints(cfg, cloud):
    if cfg.superpoints_path:
        return load_superpointization(cfg.superpoints_path, cloud)
    return oversegment(cloud, cfg.overseg)


def make_clicks(cfg, index, cloud, sp):
    """Weak annotation lifted to superpoints, re-sampling clicks on conflicts."""
    if cfg.annotation_path:
        ann = WeakAnnotation.load(cfg.annotation_path)
        return ann, lift_labels(sp, ann)
    last = None
    for attempt in range(CLICK_RETRIES):
        ann = sample_weak_labels(cloud, derive_seed(cfg.seed, index, "clicks", attempt))
        try:
            return ann, lift_labels(sp, ann)
        except LabelConflictError as err:
            last = err
    raise last


def make_predictions(cfg, index, cloud, sp, tag):
    if cfg.predictions_path:
        return load_predictions(cfg.predictions_path, sp.num_superpoints)
    noise = replace(cfg.noise, rng_seed=derive_seed(cfg.seed, index, "noise", tag))
    return oracle_predictions(cloud, sp, noise, cfg.voxel_size, cfg.embedding_dim)


def make_affinity_params(cfg, index, dim):
    if cfg.affinity_params:
        params = aff.AffinityParams.load(cfg.affinity_params)
        if params.dim != dim:
            raise ValidationError(f"affinity params dim {params.dim} != embedding dim {dim}")
        return params
    return aff.AffinityParams.default(dim, cfg.hidden, seed=derive_seed(cfg.seed, index, "gamma"))


def propagate_scene(cfg, index, cloud, sp, graph, weak, params, out=None):
    """Run ``cfg.rounds`` propagation rounds; returns final state and per-round quality."""
    state = LabelState.from_weak_labels(weak)
    quality = []

    def record(r, st):
        if cloud.gt_instance is not None:
            q = pseudo_label_quality(st, sp, cloud.gt_instance, cfg.include_annotated)
            quality.append((r, q.proportion, q.accuracy))
        if out is not None:
            st.save(out / f"labels_round{r}.tsv")

    record(0, state)
    for r in range(1, cfg.rounds + 1):
        pred = make_predictions(cfg, index, cloud, sp, f"round{r}")
        if out is not None and not cfg.predictions_path:
            pred.save(out / f"predictions_round{r}.txt")
        A = aff.compute_affinity(pred.embeddings, graph, sp.centroids, params)
        T = build_transitions(graph, A, pred.semantics, cfg.mode)
        state = propagate_labels(T, state, cfg.steps, cfg.sources)
        record(r, state)
    return state, quality


def stage_losses(cfg, cloud, sp, graph, params, pred, state, pseudo, stats):
    """Diagnostic loss values of both stages on the final labels."""
    lab = state.labeled
    if not lab.any():
        return {}
    X = aff.update_embeddings(pred.embeddings, aff.compute_affinity(pred.embeddings, graph, sp.centroids, params), params)
    assignment = np.where(lab, state.instance_label, -1)
    l_aff = losses.affinity_loss(X, assignment)
    index_of = {}
    for k, pinst in enumerate(pseudo):
        for s in pinst.superpoint_ids:
            if state.annotated[s]:
                index_of[int(state.instance_label[s])] = k
    pidx = np.array([index_of.get(int(l), -1) if l >= 0 else -1 for l in state.instance_label])
    ok = pidx >= 0
    if not ok.any():
        return {"loss.aff": l_aff.total}
    centres = np.stack([cloud.positions[p.point_ids].mean(axis=0) for p in pseudo])
    target = np.zeros_like(pred.offsets)
    target[ok] = centres[pidx[ok]] - sp.centroids[ok]
    l_off = losses.offset_loss(pred.offsets, target, ok, state.pseudo)
    l_vol = losses.volume_loss(pred.voxel_pred, pred.radius_pred, pidx, stats)
    return {
        "loss.aff": l_aff.total,
        "loss.offset": l_off,
        "loss.volume": l_vol,
        "loss.stage1_no_sem": l_aff.total + l_off,
        "loss.stage2_no_sem": l_off + l_vol,
    }


def run_scene(cfg: PipelineConfig, index: int = 0) -> SceneResult:
    out = scene_dir(cfg, index)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with stage("load"):
        cloud = load_or_generate_cloud(cfg, index)
        if out is not None:
            save_point_cloud(out / "cloud.spw", cloud, "columnar-binary")
    with stage("oversegment"):
        sp = make_superpoints(cfg, cloud)
        if out is not None:
            sp.save(out / "superpoints.txt")
    with stage("annotate"):
        ann, weak = make_clicks(cfg, index, cloud, sp)
        if out is not None:
            ann.save(out / "clicks.tsv")
    with stage("graph"):
        graph = build_graph(sp.centroids, cfg.k)
        if out is not None:
            graph.save_edges(out / "edges.txt")
    with stage("affinity"):
        params = make_affinity_params(cfg, index, cfg.embedding_dim if not cfg.predictions_path
                                      else load_predictions(cfg.predictions_path, sp.num_superpoints).dim)
        if out is not None:
            params.save(out / "affinity_params.txt")
    with stage("propagate"):
        state, quality = propagate_scene(cfg, index, cloud, sp, graph, weak, params, out)
    with stage("pseudo-instances"):
        pred = make_predictions(cfg, index, cloud, sp, "stage2")
        if out is not None and not cfg.predictions_path:
            pred.save(out / "predictions_stage2.txt")
        shifted = inst.shift_superpoints(sp.centroids, pred.offsets)
        pseudo = inst.vote_pseudo_instances(shifted, pred.semantics, state, sp)
        stats = inst.instance_volume_stats(pseudo, cloud, cfg.voxel_size)
        if out is not None:
            write_results(out / "pseudo_instances.tsv", pseudo)
            _save_stats(out / "volume_stats.tsv", stats)
    with stage("cluster"):
        occ = inst.superpoint_occupancy(cloud, sp, cfg.voxel_size)
        clustered = inst.volume_aware_cluster(graph, shifted, pred.semantics, pred.voxel_pred,
                                              pred.radius_pred, occ, cfg.lam, cfg.beta, sp)
    with stage("losses"):
        loss_vals = stage_losses(cfg, cloud, sp, graph, params, pred, state, pseudo, stats)
    with stage("evaluate"):
        report = None
        if cloud.has_ground_truth:
            report = evaluate_instances(clustered, GroundTruth.from_cloud(cloud))
            _attach_extras(report, quality, loss_vals)
        if out is not None:
            write_results(out / "instances.tsv", clustered, report)
            if report is not None:
                (out / "report.txt").write_text(report.to_text())
    return SceneResult(report, quality, loss_vals)


def _save_stats(path, stats):
    lines = ["instance\tvoxels\tradius"]
    lines += [f"{k}\t{int(v)}\t{float(r)!r}" for k, (v, r) in enumerate(zip(stats.voxels, stats.radius))]
    path.write_text("\n".join(lines) + "\n")


def _attach_extras(report, quality, loss_vals):
    for r, p, a in quality:
        report.extra[f"round{r}.proportion"] = float(p)
        report.extra[f"round{r}.accuracy"] = float(a)
    for k, v in loss_vals.items():
        report.extra[k] = float(v)


def _run_scene_args(args):
    return run_scene(*args)


def run_pipeline(cfg: PipelineConfig) -> MetricsReport:
    """Run every scene and return the scene-averaged report."""
    cfg.validate()
    jobs = [(cfg, i) for i in range(cfg.num_scenes)]
    if cfg.workers > 1 and cfg.num_scenes > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_scene_args, jobs))
    else:
        results = [run_scene(*j) for j in jobs]
    reports = [r.report for r in results if r.report is not None]
    report = mean_report(reports)
    extra_keys = list(dict.fromkeys(k for r in reports for k in r.extra))
    for k in extra_keys:
        report.extra[k] = float(np.mean([r.extra[k] for r in reports if k in r.extra]))
    report.extra["scenes"] = len(results)
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "report.txt").write_text(report.to_text())
    return report


def sweep_grid(cfg: PipelineConfig):
    keys = [k for k in SWEEP_KEYS if k in cfg.sweep]
    for values in itertools.product(*(cfg.sweep[k] for k in keys)):
        yield dict(zip(keys, values))


def run_sweep(cfg: PipelineConfig):
    """Run the pipeline over the cartesian product of ``cfg.sweep`` grids.

    Returns ``(header, rows)`` and writes ``sweep.tsv`` into ``cfg.out``.
    """
    cfg.validate()
    header = list(SWEEP_KEYS) + ["AP", "AP50", "AP25", "mCov", "mWCov", "mPrec", "mRec", "proportion", "accuracy"]
    rows = []
    for n, point in enumerate(sweep_grid(cfg)):
        sub = replace(cfg, sweep={}, out=str(Path(cfg.out) / f"run_{n:03d}") if cfg.out else None, **point)
        rep = run_pipeline(sub)
        final = sub.rounds
        row = [sub.mode, sub.steps, sub.rounds, sub.k, sub.lam, sub.beta]
        row += [rep.summary()[k] for k in ("AP", "AP50", "AP25", "mCov", "mWCov", "mPrec", "mRec")]
        row += [rep.extra.get(f"round{final}.proportion", 0.0), rep.extra.get(f"round{final}.accuracy", 0.0)]
        rows.append(row)
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        lines = ["\t".join(header)]
        lines += ["\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r) for r in rows]
        (Path(cfg.out) / "sweep.tsv").write_text("\n".join(lines) + "\n")
    return header, rows
