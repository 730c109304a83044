"""Command line interface.

Sub-commands: generate, oversegment, propagate, cluster, evaluate, pipeline,
sweep. Stage sub-commands read and write the fixed artifact names used by
the pipeline inside ``--out`` (scene 0 layout, without the ``scene_000``
level), so they can be chained::

    superseg generate --config run.ini --out work/
    superseg oversegment --out work/
    superseg propagate --out work/
    superseg cluster --out work/
    superseg evaluate --out work/

Exit codes: 0 success, 2 validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import instance as inst
from .config import PipelineConfig, load_config, with_overrides
from .errors import PipelineError, SupersegError, ValidationError
from .metrics import GroundTruth, evaluate_instances
from .overseg import lift_labels, load_superpointization, oversegment
from .pcio import load_point_cloud, read_results, save_point_cloud, write_results
from .pipeline import (
    make_affinity_params,
    make_clicks,
    make_predictions,
    propagate_scene,
    run_pipeline,
    run_sweep,
)
from .propagate import MODES, LabelState
from .provider import load_predictions
from .spgraph import build_graph
from .synth import WeakAnnotation, generate_scene

log = logging.getLogger("superseg")


def _common(p):
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="output / work directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--steps", type=int, help="walk length t")
    p.add_argument("--rounds", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--workers", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="superseg", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("generate", "generate a synthetic scene and its clicks"),
        ("oversegment", "partition the cloud into superpoints"),
        ("propagate", "build the graph and propagate click labels"),
        ("cluster", "pseudo instances, volume stats and volume-aware clustering"),
        ("evaluate", "score clustered instances against ground truth"),
        ("pipeline", "run every stage on all configured scenes"),
        ("sweep", "run the pipeline over parameter grids"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name in ("oversegment", "propagate", "cluster", "evaluate"):
            p.add_argument("--cloud", type=Path, help="cloud file (default: <out>/cloud.spw)")
        if name == "sweep":
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help="grid over mode|steps|rounds|k|lambda|beta; repeatable")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = with_overrides(cfg, seed=args.seed, out=args.out, mode=args.mode, steps=args.steps,
                         rounds=args.rounds, lam=args.lam, beta=args.beta, voxel_size=args.voxel_size,
                         k=args.k, workers=args.workers)
    if getattr(args, "grid", None):
        sweep = dict(cfg.sweep)
        for item in args.grid:
            key, _, vals = item.partition("=")
            key = "lam" if key == "lambda" else key
            conv = {"mode": str, "steps": int, "rounds": int, "k": int, "lam": float, "beta": float}.get(key)
            if conv is None or not vals:
                raise ValidationError(f"bad --grid entry {item!r}")
            sweep[key] = [conv(v) for v in vals.split(",")]
        cfg = replace(cfg, sweep=sweep)
    return cfg.validate()


def _workdir(cfg):
    if not cfg.out:
        raise ValidationError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cloud(args, out):
    path = args.cloud if getattr(args, "cloud", None) else out / "cloud.spw"
    return load_point_cloud(path)


def cmd_generate(cfg, args):
    out = _workdir(cfg)
    spec = replace(cfg.scene, rng_seed=cfg.seed)
    cloud = generate_scene(spec)
    save_point_cloud(out / "cloud.spw", cloud, "columnar-binary")
    sp_for_clicks = oversegment(cloud, cfg.overseg)
    ann, _ = make_clicks(cfg, 0, cloud, sp_for_clicks)
    ann.save(out / "clicks.tsv")
    print(f"{len(cloud)} points, {len(ann)} instances -> {out}")


def cmd_oversegment(cfg, args):
    out = _workdir(cfg)
    cloud = _cloud(args, out)
    sp = oversegment(cloud, cfg.overseg)
    sp.save(out / "superpoints.txt")
    print(f"{sp.num_superpoints} superpoints -> {out / 'superpoints.txt'}")


def _scene_inputs(cfg, args, out):
    cloud = _cloud(args, out)
    sp = load_superpointization(out / "superpoints.txt", cloud)
    return cloud, sp


def cmd_propagate(cfg, args):
    out = _workdir(cfg)
    cloud, sp = _scene_inputs(cfg, args, out)
    clicks = out / "clicks.tsv"
    if clicks.exists():
        weak = lift_labels(sp, WeakAnnotation.load(clicks))
    else:
        ann, weak = make_clicks(cfg, 0, cloud, sp)
        ann.save(clicks)
    graph = build_graph(sp.centroids, cfg.k)
    graph.save_edges(out / "edges.txt")
    params = make_affinity_params(cfg, 0, cfg.embedding_dim)
    params.save(out / "affinity_params.txt")
    state, quality = propagate_scene(cfg, 0, cloud, sp, graph, weak, params, out)
    state.save(out / "labels.tsv")
    lines = ["round\tproportion\taccuracy"] + [f"{r}\t{p:.6f}\t{a:.6f}" for r, p, a in quality]
    (out / "quality.tsv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)


def cmd_cluster(cfg, args):
    out = _workdir(cfg)
    cloud, sp = _scene_inputs(cfg, args, out)
    graph = build_graph(sp.centroids, cfg.k)
    pfile = out / "predictions_stage2.txt"
    if cfg.predictions_path:
        pred = load_predictions(cfg.predictions_path, sp.num_superpoints)
    elif pfile.exists():
        pred = load_predictions(pfile, sp.num_superpoints)
    else:
        pred = make_predictions(cfg, 0, cloud, sp, "stage2")
        pred.save(pfile)
    shifted = inst.shift_superpoints(sp.centroids, pred.offsets)
    labels_path = out / "labels.tsv"
    if labels_path.exists():
        state = LabelState.load(labels_path)
    else:
        state = LabelState.from_weak_labels(lift_labels(sp, WeakAnnotation.load(out / "clicks.tsv")))
    pseudo = inst.vote_pseudo_instances(shifted, pred.semantics, state, sp)
    write_results(out / "pseudo_instances.tsv", pseudo)
    occ = inst.superpoint_occupancy(cloud, sp, cfg.voxel_size)
    clustered = inst.volume_aware_cluster(graph, shifted, pred.semantics, pred.voxel_pred, pred.radius_pred,
                                          occ, cfg.lam, cfg.beta, sp)
    write_results(out / "instances.tsv", clustered)
    print(f"{len(pseudo)} pseudo instances, {len(clustered)} clustered instances")


def cmd_evaluate(cfg, args):
    out = _workdir(cfg)
    cloud = _cloud(args, out)
    if not cloud.has_ground_truth:
        raise ValidationError("cloud has no ground truth to evaluate against")
    clustered, _ = read_results(out / "instances.tsv")
    report = evaluate_instances(clustered, GroundTruth.from_cloud(cloud))
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")


def cmd_pipeline(cfg, args):
    report = run_pipeline(cfg)
    print(report.to_text(), end="")


def cmd_sweep(cfg, args):
    if not cfg.sweep:
        raise ValidationError("sweep needs at least one grid ([sweep] section or --grid)")
    header, rows = run_sweep(cfg)
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))


COMMANDS = {
    "generate": cmd_generate,
    "oversegment": cmd_oversegment,
    "propagate": cmd_propagate,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](cfg, args)
    except ValidationError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 2
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if isinstance(err.cause, ValidationError) else 1
    except (SupersegError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
