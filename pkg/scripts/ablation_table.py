"""Probe accuracy of model variants over several seeds, written as a variant-by-seed table."""
import argparse
from pathlib import Path

import numpy as np

from mapvae import evaluate as ev
from mapvae.config import ABLATIONS
from mapvae.experiments import DESK_PRETRAIN_STEPS, DESK_STEPS, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variants", default="No R,No P,No KL,Eucli,S-6,R-6,All",
                    help=f"comma-separated subset of: {', '.join(ABLATIONS)}")
    ap.add_argument("--steps", type=int, default=DESK_STEPS)
    ap.add_argument("--pretrain-steps", type=int, default=DESK_PRETRAIN_STEPS)
    ap.add_argument("--out", default="results/ablation.csv")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = [v.strip() for v in args.variants.split(",")]
    rows = run_ablation(seeds, variants, args.steps, args.pretrain_steps)
    table = []
    for v in variants:
        acc = [r["test_accuracy"] for r in rows if r["variant"] == v]
        table.append(dict(variant=v, **{f"seed{s}": a for s, a in zip(seeds, acc)},
                          mean=float(np.mean(acc)), std=float(np.std(acc))))
        print(f"{v:>6}: mean accuracy {np.mean(acc):.3f} over {len(acc)} seeds")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_csv(table, args.out)


if __name__ == "__main__":
    main()
