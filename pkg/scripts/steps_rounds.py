"""Walk length and round count against end-to-end metrics.

    python scripts/steps_rounds.py --config configs/example.ini --steps 1,2,3 --rounds 0,1,2,3

Each grid point runs the full pipeline (both stages) and reports the
instance metrics next to the final pseudo-label proportion and accuracy.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from superseg.config import PipelineConfig, load_config
from superseg.pipeline import run_sweep


def _ints(text):
    return [int(v) for v in text.split(",")]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--steps", type=_ints, default=[1, 2, 3])
    ap.add_argument("--rounds", type=_ints, default=[0, 1, 2, 3])
    ap.add_argument("--out", type=Path, help="directory for sweep.tsv and per-run artifacts")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = replace(cfg, out=str(args.out) if args.out else None, sweep={"steps": args.steps, "rounds": args.rounds})
    header, rows = run_sweep(cfg)
    keep = ["steps", "rounds", "AP", "AP50", "AP25", "mCov", "proportion", "accuracy"]
    idx = [header.index(k) for k in keep]
    print("\t".join(keep))
    for r in rows:
        print("\t".join(f"{r[i]:.4f}" if isinstance(r[i], float) else str(r[i]) for i in idx))


if __name__ == "__main__":
    main()
