"""Decode class-mean latents and interpolate between two class centres; writes SVG scatters."""
import argparse
from pathlib import Path

import numpy as np

from mapvae import evaluate as ev
from mapvae.experiments import run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=6)
    ap.add_argument("--out", default="results/generation")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = run_desk(args.seed)
    model, enc, cfg, data = run.checkpoint.model, run.pretrain.encoders, run.cfg, run.train_set
    z = np.stack([ev.latent_mean(c, model, enc, cfg) for c in data.inputs])
    centres = {name: z[data.labels == i].mean(axis=0) for i, name in enumerate(data.class_names)}
    for name, zc in centres.items():
        ev.export_projection(ev.generate(model, zc), out / f"mean_{name}.svg", axis="z")
    a, b = list(centres)[:2]
    for i, cloud in enumerate(ev.interpolate(model, centres[a], centres[b], args.frames)):
        ev.export_projection(cloud, out / f"interp_{a}_{b}_{i:02d}.svg", axis="z")
    for i in range(4):
        ev.export_projection(ev.generate(model, seed=i), out / f"sample_{i:02d}.svg", axis="z")
    print(f"figures written to {out}")


if __name__ == "__main__":
    main()
