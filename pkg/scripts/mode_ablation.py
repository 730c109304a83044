"""Propagation-mode ablation: labeled proportion and accuracy per round.

    python scripts/mode_ablation.py --config configs/touching.ini --out runs/ablation.tsv

Runs each mode on the same scenes, clicks and per-round predictions, so the
only difference between rows is the transition matrix.
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from superseg import pipeline as pl
from superseg.config import PipelineConfig, load_config
from superseg.metrics import pseudo_label_quality
from superseg.propagate import MODES
from superseg.spgraph import build_graph


def run_mode(cfg, mode):
    """Per-scene quality lists ``[(round, proportion, accuracy, pseudo_only_accuracy)]``."""
    cfg = replace(cfg, mode=mode)
    out = []
    for i in range(cfg.num_scenes):
        cloud = pl.load_or_generate_cloud(cfg, i)
        sp = pl.make_superpoints(cfg, cloud)
        _, weak = pl.make_clicks(cfg, i, cloud, sp)
        graph = build_graph(sp.centroids, cfg.k)
        params = pl.make_affinity_params(cfg, i, cfg.embedding_dim)
        per_round = []

        # replay round by round to also score pseudo labels alone
        for r in range(cfg.rounds + 1):
            state, quality = pl.propagate_scene(replace(cfg, rounds=r), i, cloud, sp, graph, weak, params)
            q_only = pseudo_label_quality(state, sp, cloud.gt_instance, include_annotated=False)
            per_round.append((r, quality[-1][1], quality[-1][2], q_only.accuracy))
        out.append(per_round)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--scenes", type=int, help="override num_scenes")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, help="TSV output path")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.scenes:
        cfg = replace(cfg, num_scenes=args.scenes)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    rows = []
    for mode in MODES:
        runs = np.array(run_mode(cfg, mode))  # scenes x rounds x 4
        for r in range(runs.shape[1]):
            rows.append((mode, r, *runs[:, r, 1:].mean(axis=0)))

    header = ("mode", "round", "proportion", "accuracy", "pseudo_accuracy")
    lines = ["\t".join(header)] + [f"{m}\t{r}\t{p:.4f}\t{a:.4f}\t{b:.4f}" for m, r, p, a, b in rows]
    print("\n".join(lines))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
