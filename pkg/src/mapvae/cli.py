"""Command-line entry point: ``mapvae <subcommand> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .config import TrainConfig, coerce, read_config
from .errors import ConfigError, MapVaeError, NumericError
from .geometry import PointCloud, build_sequence_pairs, load_point_cloud, normalize
from .pipeline import (Checkpoint, Dataset, load_encoders, pretrain_encoders, resample,
                       save_encoders, synthetic_dataset, train, write_loss_csv)

log = logging.getLogger("mapvae")

SUBCOMMANDS = ("split", "pretrain", "train", "embed", "classify", "segment", "generate",
               "interpolate", "complete", "export", "selftest")
CLOUD_SUFFIXES = (".xyz", ".txt", ".ply", ".off")
# short spellings used on the command line
FLAG_ALIASES = {"split_mode": ["--mode"], "train_data": ["--data"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def flag_name(field_name):
    return "--" + field_name.lower().replace("_", "-")


def _add_config_flags(p):
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--config", help="flat key=value config file")
    for f in fields(TrainConfig):
        names = [flag_name(f.name)] + FLAG_ALIASES.get(f.name, [])
        g.add_argument(*names, dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None,
                       help=f"{f.name} (default {f.default})")


def _add_data_flags(p, required=False):
    p.add_argument("--synthetic", help="comma-separated synthetic shape kinds instead of --data")
    p.add_argument("--per-class", type=int, default=30, help="synthetic shapes per kind")


def build_parser():
    parser = _Parser(prog="mapvae", description="Multi-angle point-cloud VAE toolkit",
                     allow_abbrev=False)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = {}
    for name in SUBCOMMANDS:
        p[name] = sub.add_parser(name, allow_abbrev=False)
        _add_config_flags(p[name])
        p[name].add_argument("--out", default="out", help="output directory")
    p["split"].add_argument("--input", required=True)
    p["split"].add_argument("--resample", action="store_true",
                            help="resample the cloud to 2N points when sizes differ")
    for name in ("pretrain", "train", "embed", "classify", "segment"):
        _add_data_flags(p[name])
    p["train"].add_argument("--encoders", help="pretrained encoders (.npz); pretrain if absent")
    p["train"].add_argument("--resume", help="checkpoint to continue from")
    for name in ("embed", "classify", "segment", "generate", "interpolate", "complete"):
        p[name].add_argument("--checkpoint", required=True)
    for name in ("classify", "segment"):
        p[name].add_argument("--test-fraction", type=float, default=0.25,
                             help="held-out fraction when --test-data is absent")
    p["generate"].add_argument("--count", type=int, default=4)
    p["interpolate"].add_argument("--a", help="cloud whose mean latent starts the path")
    p["interpolate"].add_argument("--b", help="cloud whose mean latent ends the path")
    p["interpolate"].add_argument("--frames", type=int, default=5, help="interpolation steps")
    p["complete"].add_argument("--input", required=True, help="partial cloud")
    p["complete"].add_argument("--truth", help="complete ground-truth cloud for EMD/point")
    p["export"].add_argument("--input", required=True)
    p["export"].add_argument("--format", choices=("xyz-text", "ascii-ply"), default="xyz-text")
    p["export"].add_argument("--projection-axis", choices=("x", "y", "z"), default="y")
    p["selftest"].add_argument("--quick", action="store_true")
    return parser


def resolve_config(args, base=None) -> TrainConfig:
    cfg = base or TrainConfig()
    if args.config:
        cfg = read_config(args.config, cfg)
    overrides = {}
    for f in fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = coerce(f.name, value)
    return cfg.replace(**overrides).validate()


def read_cloud(path, cfg: TrainConfig, seed=0) -> PointCloud:
    cloud = normalize(load_point_cloud(path, count=2 * cfg.N, seed=seed))
    if len(cloud) != 2 * cfg.N:
        cloud = resample(cloud, 2 * cfg.N, seed)
    return cloud


def load_dataset(args, cfg: TrainConfig, path=None) -> Dataset:
    path = path or cfg.train_data or None
    if path is None:
        if not getattr(args, "synthetic", None):
            raise ConfigError("give --data or --synthetic")
        kinds = [k.strip() for k in args.synthetic.split(",") if k.strip()]
        return synthetic_dataset(kinds, args.per_class, 2 * cfg.N, cfg.seed)
    path = Path(path)
    if path.is_file():
        return Dataset([read_cloud(path, cfg)], labels=np.array([0]))
    if not path.is_dir():
        raise MapVaeError(f"no such data path: {path}")
    classes = sorted(d for d in path.iterdir() if d.is_dir())
    clouds, labels, names = [], [], []
    groups = [(c, c.name) for c in classes] or [(path, path.name)]
    for label, (folder, name) in enumerate(groups):
        files = sorted(f for f in folder.iterdir() if f.suffix.lower() in CLOUD_SUFFIXES)
        for j, f in enumerate(files):
            clouds.append(read_cloud(f, cfg, seed=j))
            labels.append(label)
        names.append(name)
    if not clouds:
        raise MapVaeError(f"no point-cloud files under {path}")
    return Dataset(clouds, labels=np.array(labels), class_names=tuple(names))


def _split_dataset(args, cfg, data):
    if cfg.test_data:
        return data, load_dataset(args, cfg, cfg.test_data)
    from .pipeline import split_train_test
    return split_train_test(data, max(1, int(round(len(data) * args.test_fraction))), cfg.seed)


# --------------------------------------------------------------------------
# subcommands


def cmd_split(args, cfg, out):
    cloud = normalize(load_point_cloud(args.input, count=2 * cfg.N, seed=cfg.seed))
    if len(cloud) != 2 * cfg.N:
        if not args.resample:
            raise MapVaeError(f"cloud has {len(cloud)} points; 2N={2 * cfg.N} (use --resample)")
        cloud = resample(cloud, 2 * cfg.N, cfg.seed)
    samples = build_sequence_pairs(cloud, cfg.V, cfg.W, cfg.N, cfg.split_mode, cfg.scheme,
                                   cfg.seed, cfg.k, cfg.axis, cfg.radius_scale)
    for s in samples:
        d = out / f"sample_{s.start:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for w, half in enumerate(s.halves, 1):
            ev.export_cloud(half.front, d / f"front_{w:02d}_angle{half.angle:02d}.xyz")
            ev.export_cloud(half.back, d / f"back_{w:02d}_angle{half.angle:02d}.xyz")
    print(f"wrote {len(samples)} samples to {out}")


def cmd_pretrain(args, cfg, out):
    data = load_dataset(args, cfg)
    res = pretrain_encoders(data, cfg)
    save_encoders(res.encoders, cfg, out / "encoders.npz")
    with open(out / "pretrain_loss.csv", "w") as fh:
        fh.write("step,global,local\n")
        for step, g, l in res.history:
            fh.write(f"{step},{g!r},{l!r}\n")
    print(f"encoders written to {out / 'encoders.npz'}")


def cmd_train(args, cfg, out):
    data = load_dataset(args, cfg)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume)
        encoders = resume.encoders
    elif args.encoders:
        encoders, _ = load_encoders(args.encoders)
    else:
        encoders = pretrain_encoders(data, cfg).encoders
        save_encoders(encoders, cfg, out / "encoders.npz")
    ckpt = train(data, encoders, cfg, resume=resume, checkpoint_dir=out)
    ckpt.save(out / "checkpoint.npz")
    write_loss_csv(ckpt.history, out / "loss.csv")
    print(f"trained {ckpt.step} steps; checkpoint {out / 'checkpoint.npz'}")


def _load_ckpt(args):
    ckpt = Checkpoint.load(args.checkpoint)
    return ckpt, ckpt.config


def cmd_embed(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    data = load_dataset(args, cfg)
    H = ev.embed_dataset(data.inputs, ckpt.model, ckpt.encoders, cfg)
    rows = [dict(index=i, label=int(data.labels[i]), **{f"H{d}": repr(float(v)) for d, v in enumerate(h)})
            for i, h in enumerate(H)]
    ev.write_metrics_csv(rows, out / "embeddings.csv")
    print(f"embedded {len(H)} shapes")


def cmd_classify(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    tr, te = _split_dataset(args, cfg, load_dataset(args, cfg))
    Xtr = ev.embed_dataset(tr.inputs, ckpt.model, ckpt.encoders, cfg)
    Xte = ev.embed_dataset(te.inputs, ckpt.model, ckpt.encoders, cfg)
    probe = ev.train_probe(Xtr, tr.labels, seed=cfg.seed)
    row = dict(train_accuracy=ev.accuracy(probe.predict(Xtr), tr.labels),
               test_accuracy=ev.accuracy(probe.predict(Xte), te.labels),
               n_train=len(tr), n_test=len(te))
    ev.write_metrics_csv([row], out / "classification.csv")
    print(f"test accuracy {row['test_accuracy']:.4f}")


def cmd_segment(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    tr, te = _split_dataset(args, cfg, load_dataset(args, cfg))
    rep = ev.segment(tr.inputs, te.inputs, ckpt.model, ckpt.encoders, cfg, seed=cfg.seed)
    rows = [dict(part=c, accuracy=rep.per_class_accuracy[c], iou=rep.per_class_iou[c])
            for c in rep.per_class_iou]
    rows.append(dict(part="mean", accuracy=rep.accuracy, iou=rep.miou))
    ev.write_metrics_csv(rows, out / "segmentation.csv")
    print(f"accuracy {rep.accuracy:.4f} mIoU {rep.miou:.4f} (majority {rep.baseline_accuracy:.4f})")


def _write_cloud(cloud, out, stem):
    ev.export_cloud(cloud, out / f"{stem}.xyz")
    ev.export_projection(cloud, out / f"{stem}.svg")


def cmd_generate(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    for i in range(args.count):
        _write_cloud(ev.generate(ckpt.model, seed=cfg.seed + i), out, f"generated_{i:03d}")
    print(f"generated {args.count} clouds")


def cmd_interpolate(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    rng = np.random.default_rng(cfg.seed)
    zs = []
    for path in (args.a, args.b):
        if path:
            zs.append(ev.latent_mean(read_cloud(path, cfg), ckpt.model, ckpt.encoders, cfg))
        else:
            zs.append(rng.standard_normal(cfg.Z))
    for i, c in enumerate(ev.interpolate(ckpt.model, zs[0], zs[1], args.frames)):
        _write_cloud(c, out, f"interp_{i:03d}")
    print(f"wrote {args.frames} interpolated clouds")


def cmd_complete(args, cfg, out):
    ckpt, cfg = _load_ckpt(args)
    partial = load_point_cloud(args.input, count=2 * cfg.N, seed=cfg.seed)
    partial = resample(partial, 2 * cfg.N, cfg.seed)
    truth = resample(load_point_cloud(args.truth), 2 * cfg.N, cfg.seed) if args.truth else None
    if truth is None:
        pts, _ = ev.reconstruct_shape(partial, ckpt.model, ckpt.encoders, 1, cfg)
        _write_cloud(PointCloud(pts), out, "completed")
        print("completed cloud written")
        return
    res = ev.complete(ckpt.model, ckpt.encoders, partial, truth, cfg)
    _write_cloud(res.cloud, out, "completed")
    ev.write_metrics_csv([dict(emd_per_point=res.emd_per_point,
                               baseline_emd_per_point=res.baseline_per_point)],
                         out / "completion.csv")
    print(f"EMD/point {res.emd_per_point:.6f} (partial baseline {res.baseline_per_point:.6f})")


def cmd_export(args, cfg, out):
    cloud = load_point_cloud(args.input, count=2 * cfg.N, seed=cfg.seed)
    stem = Path(args.input).stem
    suffix = ".ply" if args.format == "ascii-ply" else ".xyz"
    ev.export_cloud(cloud, out / f"{stem}{suffix}", args.format)
    ev.export_projection(cloud, out / f"{stem}.svg", args.projection_axis)
    print(f"exported {stem}")


def cmd_selftest(args, cfg, out):
    from .selftest import run_selftest
    failures = run_selftest(quick=args.quick, stream=sys.stdout)
    if failures:
        raise NumericError(f"{failures} self-test check(s) failed")


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError) as exc:
        print(f"mapvae: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"mapvae: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (MapVaeError, OSError, ValueError) as exc:
        print(f"mapvae: data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
